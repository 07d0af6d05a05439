"""JSON configuration file and the factory that wires an engine from it.

Example::

    {
      "store_path": "./memory",
      "embedding_dim": 1536,
      "k_min": 5,
      "k_r": 2,
      "window_capacity": 20,
      "retention_limit_days": 30,
      "backend": {"kind": "openai", "base_url": "https://api.openai.com/v1",
                  "chat_model": "gpt-4o-mini", "embedding_model": "text-embedding-3-large"},
      "prompts": {"respond": "..."}
    }

The API key is never read from the file; it comes from ``ADAPTMEM_API_KEY``
(or ``OPENAI_API_KEY``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from datetime import timedelta
from pathlib import Path

from .llm import Gateway, OpenAICompatibleBackend
from .offline import OfflineBackend
from .pipeline import MemoryEngine, PipelineConfig
from .prompts import PromptSet
from .store import MemoryStore, StoreConfig

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("openai", "offline")


@dataclass
class BackendSettings:
    kind: str = "offline"
    base_url: str | None = None
    chat_model: str = "gpt-4o-mini"
    embedding_model: str = "text-embedding-3-large"
    temperature: float = 0.0
    max_retries: int = 2
    timeout: float = 60.0

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")


@dataclass
class AppConfig:
    store_path: str = "./adaptmem-store"
    embedding_dim: int = 64
    k_min: int = 5
    k_r: int = 2
    window_capacity: int = 20
    retention_limit_days: float | None = None
    fsync: bool = True
    backend: BackendSettings = field(default_factory=BackendSettings)
    prompts: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "AppConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        d["backend"] = BackendSettings(**d.get("backend", {}))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path | None) -> "AppConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            cfg = cls.from_dict(json.load(fh))
        # Relative store paths resolve against the config file's directory.
        if not Path(cfg.store_path).is_absolute():
            cfg.store_path = str(Path(path).resolve().parent / cfg.store_path)
        return cfg

    @property
    def retention_limit(self) -> timedelta | None:
        if self.retention_limit_days is None:
            return None
        return timedelta(days=self.retention_limit_days)

    def store_config(self) -> StoreConfig:
        return StoreConfig(self.store_path, self.embedding_dim, self.retention_limit, self.k_min, self.fsync)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(k_r=self.k_r, k_min=self.k_min, window_capacity=self.window_capacity)

    def build_gateway(self) -> Gateway:
        b = self.backend
        if b.kind == "offline":
            chat = OfflineBackend(self.embedding_dim)
        else:
            chat = OpenAICompatibleBackend(
                base_url=b.base_url,
                chat_model=b.chat_model,
                embedding_model=b.embedding_model,
                dimensions=self.embedding_dim,
                timeout=b.timeout,
            )
        return Gateway(
            chat,
            dim=self.embedding_dim,
            prompts=PromptSet.from_overrides(self.prompts),
            temperature=b.temperature,
            max_retries=b.max_retries,
        )

    def build_engine(self) -> MemoryEngine:
        store = MemoryStore(self.store_config())
        return MemoryEngine(store, self.build_gateway(), self.pipeline_config())
