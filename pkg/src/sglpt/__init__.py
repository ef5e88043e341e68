"""Graph self-supervised pre-training (masked autoencoding + momentum contrast) and prototype prompt tuning."""
from .autodiff import DegenerateInputError, Tensor, backward, no_grad
from .config import ConfigError, PretrainConfig, PromptConfig, RunConfig, load_config, preset
from .data import DatasetBundle, load_dataset, make_split, parse_tudataset, synthetic_motif_dataset
from .evaluate import MetricRecord, run_protocol
from .gnn import ModelState
from .graph import AugmentSpec, Graph, GraphBatch, add_prompt_supernode, apply_mask, augment
from .optim import ContractViolation, ema_update
from .pretrain import DynamicQueue, nt_xent_with_queue, pretrain, scaled_cosine_error
from .prompt import PrototypeBank, predict, prompt_tune, spcl_loss

__version__ = "0.1.0"
