"""Continual LoRA adaptation with a softmax-KL proximal anchor, at desk scale."""
from .adapters import (POLICIES, AdapterStack, FrozenAdapter, LoraAdapter, ParamVector,
                       effective_delta, inflora_init, pack, seal_stage, unpack)
from .errors import PesoError
from .harness import ExperimentConfig, RunReport, run_pipeline, run_sweep
from .proximal import REGULARIZERS, variant_value_grad

__version__ = "0.1.0"
