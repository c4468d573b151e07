"""RGB and event-camera single object tracking with Gaussian uncertainty fusion."""

from .config import DEFAULTS, RunConfig
from .datamodel import (
    BoundingBox,
    SequenceRecord,
    SynthConfig,
    generate_synthetic_sequence,
    load_sequence,
    pair_frame_with_events,
    write_sequence,
)
from .errors import ConfigError, EvfuseError, IncompatibleCheckpointError, IntegrityError, NumericError
from .evaluation import OPEResult, emit_plots, evaluate_with_attributes, ope_evaluate
from .eventio import EventFrame, EventStream, parse_event_stream, stack_events
from .model import FusionTracker, build_model
from .tracker import Tracker, run_sequence
from .trainer import Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "ConfigError", "DEFAULTS", "EventFrame", "EventStream", "EvfuseError", "FusionTracker",
    "IncompatibleCheckpointError", "IntegrityError", "NumericError", "OPEResult", "RunConfig", "SequenceRecord",
    "SynthConfig", "Tracker", "Trainer", "build_model", "emit_plots", "evaluate_with_attributes",
    "generate_synthetic_sequence", "load_checkpoint", "load_sequence", "ope_evaluate", "pair_frame_with_events",
    "parse_event_stream", "run_sequence", "save_checkpoint", "stack_events", "write_sequence",
]
