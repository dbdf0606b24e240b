from .graph_blocks import GraphBlockParams as GraphBlockParams
