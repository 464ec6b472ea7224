"""In-process federated protocol: local SGD, FedAvg, rounds, checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedmtl import nn
from fedmtl.data import ClientDataset
from fedmtl.model import LayerGroup, ModelConfig, loss_and_grads, tensor_layout

CKPT_MAGIC = b"FMTLCKPT"
CKPT_VERSION = 1


class FreezeViolation(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def derive_seed(seed: int, *parts) -> int:
    """Stable child seed from a root seed and any mix of ints / strings."""
    words = [int(seed)]
    for p in parts:
        words.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def _mask_names(mask, names) -> set[str]:
    if mask is None:
        return set(names)
    if isinstance(mask, dict):
        return {k for k, v in mask.items() if v}
    return set(mask)


@dataclass
class ClientUpdate:
    client_id: str
    params: dict[str, np.ndarray]
    n_k: int


def local_train(config: ModelConfig, client: ClientDataset, start: dict[str, np.ndarray], mask,
                epochs: int, lr: float, batch_size: int, seed: int, tasks=None) -> ClientUpdate:
    """Mini-batch SGD on the client's train split.

    Only tensors selected by ``mask`` move; the others are returned as the
    very same arrays.  ``tasks`` limits which heads contribute to the loss.
    """
    if not client.train:
        raise ValueError(f"client {client.client_id} has an empty train set")
    trainable = _mask_names(mask, start)
    params = dict(start)
    if epochs > 0 and trainable:
        X, Y = client.arrays("train", config.tasks)
        rng = np.random.default_rng(seed)
        n = len(X)
        for _ in range(epochs):
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                _, grads = loss_and_grads(config, params, X[idx], {t: y[idx] for t, y in Y.items()}, tasks)
                params = nn.sgd_step(params, grads, lr, trainable)
    return ClientUpdate(client.client_id, params, client.n_k)


def _same_bits(arrays: list[np.ndarray]) -> bool:
    first = arrays[0].tobytes()
    return all(a.shape == arrays[0].shape and a.tobytes() == first for a in arrays[1:])


def fedavg_aggregate(updates: list[ClientUpdate], mask=None) -> dict[str, np.ndarray]:
    """Sample-count weighted mean of the trainable tensors.

    Updates are summed in ascending ``client_id`` order, so the result does not
    depend on presentation order.  Frozen tensors must agree bit for bit.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ups]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids in updates")
    names = list(ups[0].params)
    for u in ups[1:]:
        if list(u.params) != names:
            raise ValueError(f"update from {u.client_id} is incongruent with the others")
        for k in names:
            if u.params[k].shape != ups[0].params[k].shape:
                raise ValueError(f"update from {u.client_id}: shape mismatch on {k}")
    total = sum(u.n_k for u in ups)
    if total <= 0 or any(u.n_k < 1 for u in ups):
        raise ValueError("aggregation weights must be >= 1")
    trainable = _mask_names(mask, names)
    out = {}
    for k in names:
        arrays = [u.params[k] for u in ups]
        if k not in trainable:
            if not _same_bits(arrays):
                raise FreezeViolation(f"freeze violation on {k}")
            out[k] = arrays[0]
            continue
        if _same_bits(arrays):
            out[k] = arrays[0].copy()
            continue
        acc = np.zeros_like(arrays[0])
        for u, a in zip(ups, arrays):
            acc += (u.n_k / total) * a
        out[k] = acc
    return out


# --- global state -------------------------------------------------------------

@dataclass
class GlobalState:
    """Parameters split by who owns them.

    ``shared`` holds pre-trained and common tensors, ``per_task[t]`` the
    task-specific branch of task ``t`` and ``per_client[c]`` client ``c``'s
    personalized tensors.
    """

    config: ModelConfig
    shared: dict[str, np.ndarray] = field(default_factory=dict)
    per_task: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    per_client: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @staticmethod
    def scope(info) -> str:
        if info.group in (LayerGroup.PRETRAINED, LayerGroup.COMMON):
            return "shared"
        if info.group is LayerGroup.TASK_SPECIFIC:
            return f"task:{info.task}"
        return "client"

    @classmethod
    def from_params(cls, config: ModelConfig, params: dict[str, np.ndarray], client_ids) -> "GlobalState":
        st = cls(config, {}, {t: {} for t in config.tasks}, {cid: {} for cid in client_ids})
        st.write_back(params, list(params), client_ids)
        return st

    def write_back(self, params: dict[str, np.ndarray], names, client_ids) -> None:
        layout = tensor_layout(self.config)
        for name in names:
            scope = self.scope(layout[name][1])
            if scope == "shared":
                self.shared[name] = params[name]
            elif scope.startswith("task:"):
                self.per_task.setdefault(scope[5:], {})[name] = params[name]
            else:
                for cid in client_ids:
                    self.per_client.setdefault(cid, {})[name] = params[name]

    def materialize(self, client_id: str) -> dict[str, np.ndarray]:
        """Full parameter set as seen by ``client_id``.

        A client without personalized tensors of its own (e.g. a held-out
        client) gets the equal-weight mean of all known clients' tensors.
        """
        layout = tensor_layout(self.config)
        own = self.per_client.get(client_id)
        out = {}
        for name, (_, info) in layout.items():
            scope = self.scope(info)
            if scope == "shared":
                out[name] = self.shared[name]
            elif scope.startswith("task:"):
                out[name] = self.per_task[scope[5:]][name]
            elif own is not None:
                out[name] = own[name]
            else:
                known = [self.per_client[c][name] for c in sorted(self.per_client)]
                if not known:
                    raise KeyError(f"no personalized tensors available for {client_id}")
                out[name] = known[0] if _same_bits(known) else np.mean(known, axis=0)
        return out

    def copy(self) -> "GlobalState":
        return GlobalState(self.config, dict(self.shared),
                           {t: dict(v) for t, v in self.per_task.items()},
                           {c: dict(v) for c, v in self.per_client.items()})

    def entries(self):
        """``(scope, name, array)`` in canonical order."""
        layout = tensor_layout(self.config)
        for name in layout:
            if name in self.shared:
                yield "shared", name, self.shared[name]
        for task in sorted(self.per_task):
            for name in layout:
                if name in self.per_task[task]:
                    yield f"task:{task}", name, self.per_task[task][name]
        for cid in sorted(self.per_client):
            for name in layout:
                if name in self.per_client[cid]:
                    yield f"client:{cid}", name, self.per_client[cid][name]


# --- rounds -------------------------------------------------------------------

@dataclass
class RoundPlan:
    participants: list[str]
    mask: dict[str, bool]
    local_epochs: int
    lr: float
    batch_size: int = 16
    tasks: list[str] | None = None  # heads contributing to the loss
    required_task: str | None = None

    def __post_init__(self):
        if not self.participants:
            raise ValueError("a round needs at least one participant")


def run_round(state: GlobalState, plan: RoundPlan, clients: dict[str, ClientDataset], seed: int,
              workers: int = 1) -> GlobalState:
    """Broadcast, train locally, aggregate and write the masked tensors back."""
    for cid in plan.participants:
        if cid not in clients:
            raise KeyError(f"unknown participant {cid}")
        if plan.required_task and not clients[cid].task_availability.get(plan.required_task, False):
            raise ValueError(f"participant {cid} lacks task {plan.required_task}")
    names = list(tensor_layout(state.config))
    if set(plan.mask) != set(names):
        raise ValueError("round mask is incongruent with the model")

    def train(cid):
        return local_train(state.config, clients[cid], state.materialize(cid), plan.mask,
                           plan.local_epochs, plan.lr, plan.batch_size, derive_seed(seed, cid), plan.tasks)

    ordered = sorted(plan.participants)
    if workers > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(train, ordered))
    else:
        updates = [train(cid) for cid in ordered]
    agg = fedavg_aggregate(updates, plan.mask)
    new = state.copy()
    new.write_back(agg, [k for k in names if plan.mask[k]], ordered)
    return new


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(state: GlobalState, path) -> None:
    """Header (magic, version, config digest), JSON manifest, raw float64 LE data."""
    layout = tensor_layout(state.config)
    manifest, blobs = [], []
    for scope, name, arr in state.entries():
        manifest.append({"scope": scope, "name": name, "group": layout[name][1].tag,
                         "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    mbytes = json.dumps({"entries": manifest}, sort_keys=True, separators=(",", ":")).encode()
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(bytes.fromhex(state.config.digest()))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for b in blobs:
            fh.write(b)


def read_manifest(path) -> tuple[int, str, list[dict], int]:
    """``(version, digest, entries, data_offset)``."""
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 4 + 32 + 8
    if len(raw) < head or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (version,) = struct.unpack_from("<I", raw, len(CKPT_MAGIC))
    digest = raw[len(CKPT_MAGIC) + 4:len(CKPT_MAGIC) + 36].hex()
    (mlen,) = struct.unpack_from("<Q", raw, len(CKPT_MAGIC) + 36)
    if len(raw) < head + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        entries = json.loads(raw[head:head + mlen])["entries"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    return version, digest, entries, head + mlen


def load_checkpoint(path, config: ModelConfig) -> GlobalState:
    version, digest, entries, offset = read_manifest(path)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if digest != config.digest():
        raise CheckpointError(f"{path}: model config digest {digest[:12]}… does not match "
                              f"the configured model {config.digest()[:12]}…")
    raw = Path(path).read_bytes()
    layout = tensor_layout(config)
    state = GlobalState(config, {}, {}, {})
    pos = offset
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        if name not in layout or layout[name][0] != shape:
            raise CheckpointError(f"{path}: tensor {name} {shape} not in the configured model")
        size = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data at {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += size
        scope = e["scope"]
        if scope == "shared":
            state.shared[name] = arr
        elif scope.startswith("task:"):
            state.per_task.setdefault(scope[5:], {})[name] = arr
        elif scope.startswith("client:"):
            state.per_client.setdefault(scope[7:], {})[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown scope {scope!r}")
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return state
