from .errors import HggError as HggError
