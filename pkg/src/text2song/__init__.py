"""Two-stage text-to-song synthesis: score -> vocal tokens -> accompaniment tokens -> mix."""
from .audio import Waveform, read_wav, write_wav
from .errors import (CapacityError, ConfigurationError, MissingPrerequisiteError, StageError, Text2SongError,
                     TrainingDivergedError, ValidationError)
from .score import MusicScore

__version__ = "0.1.0"
