"""Multi-granularity long-term memory for conversational agents.

The pipeline stores every turn as raw text, atomic facts and (at topic
boundaries) episode summaries, then answers each new turn by routing the
query to the right granularity, checking the retrieved evidence and
repairing stale memories before responding.
"""

from .config import AppConfig, BackendSettings
from .errors import (
    BackendUnavailable,
    ContractViolation,
    Deleted,
    DimensionMismatch,
    GatewayError,
    MalformedRecord,
    MemoryEngineError,
    NotFound,
    StorageFailure,
)
from .evaluation import EvalReport, QAItem, ingest_corpus, llm_judge, run_eval
from .llm import Gateway, HashEmbedder, OpenAICompatibleBackend, ScriptedBackend
from .metrics import metric_bleu1, metric_f1
from .offline import OfflineBackend
from .pipeline import MemoryEngine, Mode, PipelineConfig, TurnOutcome
from .prompts import PromptSet
from .store import MemoryStore, StoreConfig
from .types import (
    Action,
    ContextWindow,
    Granularity,
    MemoryEntry,
    MetaInfo,
    RefreshAction,
    Speaker,
    TurnId,
    TurnRecord,
)

__version__ = "0.1.0"
