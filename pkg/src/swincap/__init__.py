"""Window-based MLP / attention transformer captioners built on a small numpy autodiff core."""
from .complexity import CostReport, cost_msa, cost_wmlp, cost_wmsa, model_report
from .config import RunConfig
from .estimator import SwinCaptioner
from .metrics import bleu4, cider
from .tensor import Tensor, count_macs, no_grad

__all__ = [
    "CostReport",
    "RunConfig",
    "SwinCaptioner",
    "Tensor",
    "bleu4",
    "cider",
    "cost_msa",
    "cost_wmlp",
    "cost_wmsa",
    "count_macs",
    "model_report",
    "no_grad",
]
__version__ = "0.1.0"
