"""Model configuration, presets, and the flat key=value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

PROTO_MODES = ("none", "nodes", "only", "info")
DISTANCE_KINDS = ("abs", "squared")
HEADS = ("row", "feature")
MAX_ITERATIONS = 5

ADJ_WIDTHS_3WAY = (64, 32, 1)
ADJ_WIDTHS_5WAY = (64, 64, 32, 32, 1)


class ConfigError(ValueError):
    pass


@dataclass
class EmbeddingConfig:
    input_size: int = 32
    stem_filters: int = 16
    stem_stride: int = 2
    block_widths: Tuple[int, ...] = (16, 32, 64)
    basic_blocks_per_stage: int = 2
    residual: bool = True

    def validate(self):
        if self.input_size < 8:
            raise ConfigError(f"input_size must be >= 8, got {self.input_size}")
        if not self.block_widths:
            raise ConfigError("block_widths is empty")
        if self.basic_blocks_per_stage < 1:
            raise ConfigError("basic_blocks_per_stage must be >= 1")
        if self.stem_stride < 1:
            raise ConfigError("stem_stride must be >= 1")

    @property
    def out_dim(self) -> int:
        return self.block_widths[-1]


@dataclass
class GraphConfig:
    n_way: int = 3
    k_shot: int = 5
    iterations: int = 3
    dense: bool = True
    proto_mode: str = "nodes"
    distance_kind: str = "abs"
    adjacency_widths: Tuple[int, ...] = ADJ_WIDTHS_3WAY
    hidden_width: int = 48
    head: str = "feature"
    normalize_adjacency: bool = True
    node_norm: bool = True

    def validate(self):
        if self.n_way < 2:
            raise ConfigError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise ConfigError(f"k_shot must be >= 1, got {self.k_shot}")
        if not 0 <= self.iterations <= MAX_ITERATIONS:
            raise ConfigError(f"iterations must be in 0..{MAX_ITERATIONS}, got {self.iterations}")
        if self.proto_mode not in PROTO_MODES:
            raise ConfigError(f"proto_mode must be one of {PROTO_MODES}, got {self.proto_mode!r}")
        if self.distance_kind not in DISTANCE_KINDS:
            raise ConfigError(f"distance_kind must be one of {DISTANCE_KINDS}, got {self.distance_kind!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if not self.adjacency_widths or self.adjacency_widths[-1] != 1:
            raise ConfigError("adjacency_widths must end with a single output filter")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be >= 1")

    def node_count(self) -> int:
        nk = self.n_way * self.k_shot
        return {"none": nk + 1, "info": nk + 1, "nodes": nk + self.n_way + 1, "only": self.n_way + 1}[self.proto_mode]

    def input_dim(self, embed_dim: int) -> int:
        d = embed_dim + self.n_way
        return 2 * d if self.proto_mode == "info" else d

    def final_dim(self, embed_dim: int) -> int:
        d0 = self.input_dim(embed_dim)
        if self.iterations == 0:
            return d0
        return d0 + self.iterations * self.hidden_width if self.dense else self.hidden_width


@dataclass
class ModelConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    lr: float = 1e-3
    seed: int = 0
    norm_eval: str = "batch"

    def validate(self) -> "ModelConfig":
        self.embedding.validate()
        self.graph.validate()
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.norm_eval not in ("running", "batch"):
            raise ConfigError(f"norm_eval must be 'running' or 'batch', got {self.norm_eval!r}")
        return self

    def replace(self, **graph_changes) -> "ModelConfig":
        """Copy with graph-level fields changed."""
        return dataclasses.replace(self, graph=dataclasses.replace(self.graph, **graph_changes))

    def to_flat(self) -> Dict[str, Any]:
        out = {f"embedding.{k}": v for k, v in dataclasses.asdict(self.embedding).items()}
        out.update({f"graph.{k}": v for k, v in dataclasses.asdict(self.graph).items()})
        out.update(lr=self.lr, seed=self.seed, norm_eval=self.norm_eval)
        return out


def default_lr(n_way: int) -> float:
    """Learning rate used for each task size: 0.001 for 3-way, 0.01 for 5-way."""
    return 0.01 if n_way >= 5 else 0.001


def preset(name: str = "desk", n_way: int = 3, k_shot: int = 5, **graph_overrides) -> ModelConfig:
    """Architecture presets.

    ``paper``: 100x100 input, 6 basic blocks per stage, unstrided stem.
    ``desk``: 32x32 input, 2 basic blocks per stage, stride-2 stem.
    """
    if name == "paper":
        emb = EmbeddingConfig(input_size=100, stem_stride=1, basic_blocks_per_stage=6)
    elif name == "desk":
        emb = EmbeddingConfig()
    else:
        raise ConfigError(f"unknown preset {name!r} (expected desk or paper)")
    widths = ADJ_WIDTHS_5WAY if n_way >= 5 else ADJ_WIDTHS_3WAY
    graph = GraphConfig(n_way=n_way, k_shot=k_shot, adjacency_widths=widths)
    graph = dataclasses.replace(graph, **graph_overrides)
    return ModelConfig(embedding=emb, graph=graph, lr=default_lr(n_way)).validate()


# ----------------------------------------------------------- key=value files


def parse_value(raw: str) -> Any:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        return [parse_value(p) for p in inner.split(",")] if inner else []
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def read_config_file(path) -> Dict[str, Any]:
    """Read a flat ``key = value`` file (a TOML subset: no tables, no multiline values)."""
    out: Dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    return repr(v)


def write_config_file(path, values: Dict[str, Any], header: Optional[str] = None):
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {format_value(v)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")
