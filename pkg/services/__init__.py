"""Pipeline services: traces, model backend, scoring, steering, pairs and evaluation."""
from .model_backend import ByteTokenizer, InjectionHook, MicroTransformer, ModelConfig, PositionPolicy
from .pairgen import PairgenService, RewriterConfig, RewriterMode
from .steering import ContrastivePair, SteeringVector
from .sweep_eval import EvalItem, EvalReport, SweepResult
from .trace_core import ReasoningTrace

__all__ = [
    'ByteTokenizer',
    'InjectionHook',
    'MicroTransformer',
    'ModelConfig',
    'PositionPolicy',
    'PairgenService',
    'RewriterConfig',
    'RewriterMode',
    'ContrastivePair',
    'SteeringVector',
    'EvalItem',
    'EvalReport',
    'SweepResult',
    'ReasoningTrace',
]
