"""Top-K cross-encoder reranking that streams a transformer layer by layer.

All candidates advance through the layers as one batch.  Between layers,
candidates whose final rank is already settled are accepted or dropped, so
later layers run on fewer of them.
"""
from .engine import CandidateBatch, Engine, RerankResult, Runtime, ScriptedScorer, plan_chunks, rerank
from .errors import MonorankError
from .metrics import precision_at_k
from .profile import DeviceProfile
from .prune import PruneConfig, calibrate_threshold, kmeans_1d
from .store import ModelSpec, gen_synthetic_model, read_manifest

__version__ = "0.1.0"

__all__ = [
    "CandidateBatch",
    "DeviceProfile",
    "Engine",
    "ModelSpec",
    "MonorankError",
    "PruneConfig",
    "RerankResult",
    "Runtime",
    "ScriptedScorer",
    "calibrate_threshold",
    "gen_synthetic_model",
    "kmeans_1d",
    "plan_chunks",
    "precision_at_k",
    "read_manifest",
    "rerank",
]
