from .pipeline import HumanGaussianPipeline as HumanGaussianPipeline
from .utils.types import BodyTemplate as BodyTemplate, Camera as Camera, GaussianCloud as GaussianCloud, GaussianFrame as GaussianFrame, GaussianPrimitive as GaussianPrimitive, Pose as Pose
