"""Neural Turing machines with a stored-program memory (NUTM) on numpy."""
from .autodiff import Tensor, backward, finite_difference_check
from .estimator import NUTMSequenceClassifier, StateProjector
from .machine import Machine, MachineConfig, load_checkpoint, save_checkpoint
from .tasks import TaskSource, TaskSpec, generate_task
from .training import TrainConfig, evaluate, pca_project, train_loop

__all__ = [
    "Machine", "MachineConfig", "NUTMSequenceClassifier", "StateProjector", "TaskSource", "TaskSpec",
    "Tensor", "TrainConfig", "backward", "evaluate", "finite_difference_check", "generate_task",
    "load_checkpoint", "pca_project", "save_checkpoint", "train_loop",
]
__version__ = "0.1.0"
