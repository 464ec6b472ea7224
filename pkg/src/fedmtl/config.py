"""JSON experiment configs: schema validation and construction of experiments."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema

from fedmtl.data import (TASKS, ClientDataset, DataConfig, LabelMap, SyntheticSpec, build_client_dataset,
                         default_label_map, ingest_csv, merge_labels, split_streams, synthetic_records,
                         windows_from_records)
from fedmtl.model import ModelConfig
from fedmtl.nn import LayerSpec
from fedmtl.pipeline import ExperimentSpec, StagePlanConfig, TrainingConfig


class ConfigError(ValueError):
    pass


def config_schema() -> dict:
    return json.loads(resources.files("fedmtl").joinpath("config_schema.json").read_text(encoding="utf-8"))


def validate_config(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  at /{'/'.join(str(p) for p in e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigError("config does not match the schema:\n" + "\n".join(lines))
    src = doc["data"]["source"]
    if src not in doc["data"]:
        raise ConfigError(f"data.source is {src!r} but data.{src} is missing")


def _pick(cls, section: dict | None):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in (section or {}).items() if k in names})


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    stages: StagePlanConfig = field(default_factory=StagePlanConfig)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        validate_config(doc)
        d = doc["data"]
        data = _pick(DataConfig, d)
        if d["source"] == "csv" and isinstance(d["csv"].get("native_hz"), (int, float)):
            data.native_hz = float(d["csv"]["native_hz"])
        return cls(doc, Path(base_dir), data, _pick(TrainingConfig, doc.get("training")),
                   _pick(StagePlanConfig, doc.get("stages")))

    @property
    def source(self) -> str:
        return self.raw["data"]["source"]

    @property
    def seed(self) -> int:
        return self.raw.get("seed", 7)

    @property
    def data_seed(self) -> int:
        return self.raw.get("data_seed", self.seed)

    @property
    def regimes(self) -> list[str]:
        r = self.raw["regime"]
        return [r] if isinstance(r, str) else list(r)

    @property
    def tasks(self) -> list[str] | None:
        return self.raw.get("tasks")

    @property
    def synthetic(self) -> SyntheticSpec:
        spec = _pick(SyntheticSpec, self.raw["data"].get("synthetic"))
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return spec

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def output_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        return self.base_dir / self.raw.get("output_dir", "runs/out")

    def label_map(self) -> LabelMap | None:
        lm = self.raw["data"].get("label_maps", "default")
        if lm == "default":
            return default_label_map()
        return LabelMap(lm.get("activity", {}), lm.get("position", {}), lm.get("passthrough", False))

    def csv_clients(self) -> dict[str, Path]:
        return {cid: self.base_dir / p for cid, p in self.raw["data"]["csv"]["clients"].items()}

    def native_hz(self, client_id: str) -> float:
        hz = self.raw["data"].get("csv", {}).get("native_hz", 10.0)
        return float(hz.get(client_id, 10.0)) if isinstance(hz, dict) else float(hz)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(doc, path.parent)


# --- data resolution ----------------------------------------------------------

def _client_windows(cfg: RunConfig, client_id: str, path: Path):
    dc = DataConfig(**{**cfg.data.__dict__, "native_hz": cfg.native_hz(client_id)})
    return windows_from_records(ingest_csv(path), dc, cfg.label_map())


def resolve_vocab(cfg: RunConfig) -> dict[str, list[str]]:
    """Explicit vocabularies win; otherwise synthetic names or the sorted CSV label union."""
    explicit = cfg.raw["data"].get("vocab", {})
    if cfg.source == "synthetic":
        vocab = cfg.synthetic.vocab()
    else:
        seen: dict[str, set] = {t: set() for t in TASKS}
        lm = cfg.label_map()
        for path in cfg.csv_clients().values():
            for stream in split_streams(ingest_csv(path)):
                for r in merge_labels(stream, lm):
                    for t in TASKS:
                        if r.label(t) is not None:
                            seen[t].add(r.label(t))
        vocab = {t: sorted(v) for t, v in seen.items()}
    vocab.update(explicit)
    return {t: v for t, v in vocab.items() if len(v) >= 2}


def load_clients(cfg: RunConfig, vocab: dict[str, list[str]], csv_paths=None) -> dict[str, ClientDataset]:
    """Client datasets from the configured source, or from ``csv_paths`` (id -> path) if given."""
    if csv_paths is None and cfg.source == "synthetic":
        records = synthetic_records(cfg.synthetic, cfg.data.window_length, cfg.data_seed)
        return {cid: build_client_dataset(cid, windows_from_records(recs, cfg.data, None), vocab, cfg.data,
                                          cfg.data_seed)
                for cid, recs in records.items()}
    paths = cfg.csv_clients() if csv_paths is None else csv_paths
    return {cid: build_client_dataset(cid, _client_windows(cfg, cid, Path(p)), vocab, cfg.data, cfg.data_seed)
            for cid, p in sorted(paths.items())}


def model_config(cfg: RunConfig, vocab: dict[str, list[str]]) -> ModelConfig:
    m = cfg.raw.get("model", {})
    kw = {"heads": {t: len(vocab[t]) for t in TASKS if t in vocab},
          "window_length": cfg.data.window_length}
    if "conv_layers" in m:
        kw["conv_layers"] = [LayerSpec("conv1d", out_channels=c["out_channels"], kernel_size=c["kernel_size"])
                             for c in m["conv_layers"]]
    if "lstm_layers" in m:
        kw["lstm_layers"] = [LayerSpec("lstm", hidden_size=c["hidden_size"]) for c in m["lstm_layers"]]
    if "group_partition" in m:
        kw["group_partition"] = dict(m["group_partition"])
    if "input_channels" in m:
        kw["input_channels"] = m["input_channels"]
    try:
        return ModelConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def build_experiment(cfg: RunConfig, workers: int = 1, csv_paths=None) -> ExperimentSpec:
    vocab = resolve_vocab(cfg)
    mc = model_config(cfg, vocab)
    clients = load_clients(cfg, vocab, csv_paths)
    return ExperimentSpec(mc, clients, cfg.regimes, cfg.tasks, cfg.training, cfg.stages, cfg.seed, workers)
