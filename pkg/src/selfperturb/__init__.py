"""Self-perturbation training for attack-agnostic adversarial-face detection."""
__version__ = "0.1.0"

from .detector import ADV, REAL, DetectorConfig, DetectorModel, init_model, predict  # noqa: E402
from .evalkit import ScoredSample, accuracy_at, auc, kmeans_noise  # noqa: E402
from .fixtures import FixtureSpec, gen_dataset, gen_fixture  # noqa: E402
from .imaging import LandmarkSet, load_image, save_image  # noqa: E402
from .perturb_gan import GanPerturbConfig  # noqa: E402
from .perturb_gradient import GradientPerturbConfig  # noqa: E402
from .synth import self_perturb  # noqa: E402
from .training import RunConfig, train_detector  # noqa: E402

__all__ = [
    "ADV", "REAL", "DetectorConfig", "DetectorModel", "FixtureSpec", "GanPerturbConfig",
    "GradientPerturbConfig", "LandmarkSet", "RunConfig", "ScoredSample", "accuracy_at", "auc",
    "gen_dataset", "gen_fixture", "init_model", "kmeans_noise", "load_image", "predict",
    "save_image", "self_perturb", "train_detector",
]
