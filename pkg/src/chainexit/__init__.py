"""Exit probabilities of cascaded diffusion chains by Monte Carlo, PDE and minimum action."""
from ._backend import BACKEND
from .domain import Domain, ball, box, interval
from .model import ChainModel, builtin_model, load_model, parse_model

__version__ = "0.1.0"

__all__ = ["BACKEND", "ChainModel", "Domain", "ball", "box", "builtin_model", "interval",
           "load_model", "parse_model", "__version__"]
