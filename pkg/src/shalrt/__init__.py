"""Multi-turn joint intent detection and slot filling with salient history attention."""
from .config import RunConfig, load_config
from .data import DialogueSession, LabelSets, Turn, Vocab, load_corpus, make_batches, record_prediction
from .errors import ShalrtError
from .model import ShaLrt

__all__ = [
    "DialogueSession", "LabelSets", "RunConfig", "ShaLrt", "ShalrtError", "Turn", "Vocab", "load_config",
    "load_corpus", "make_batches", "record_prediction",
]
__version__ = "0.1.0"
