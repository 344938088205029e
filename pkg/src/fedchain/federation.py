"""Federated orchestration: partitioning, memory accounting, rounds, baselines.

A run proceeds in two phases.  Phase 1 profiles layer similarity on every
device, aggregates the profiles to pick the start layer, and sizes the
trainable window from the tightest device memory budget.  Phase 2 runs
synchronous rounds: sample clients, train the current window locally,
upload deltas, apply the sample-size-weighted mean to the global model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .chain import ParamDelta, StageLossConfig, WindowSchedule, local_update
from .model import (
    ModelStack,
    StackDims,
    build_stack,
    evaluate_accuracy,
    named_parameters,
)
from .similarity import CKAProfile, aggregate_profiles, profile_layers, select_start_layer

# documented accounting assumptions (fp16 weights, Adam-style fp32 moments)
PRECISION_BYTES = 2
OPTIMIZER_MULTIPLIER = 4
DEFAULT_ASSUMPTIONS = {"batch": 16, "seq_len": 512,
                       "precision_bytes": PRECISION_BYTES,
                       "optimizer_multiplier": OPTIMIZER_MULTIPLIER}

MEMORY_PRESETS = {
    "llama2-7b-shaped": StackDims(L=32, u=4096, v=64, C=32000, kind="attn-lite",
                                  ffn=11008, vocab=32000),
    "llama2-13b-shaped": StackDims(L=40, u=5120, v=64, C=32000, kind="attn-lite",
                                   ffn=13824, vocab=32000),
}

IO_NOTE = "block load/evict I/O assumed overlapped with compute; latency not modeled"

# seed-derivation tags; one master seed drives every stochastic choice
_TAG_STACK, _TAG_DATA, _TAG_SPLIT, _TAG_PARTITION, _TAG_SAMPLE, _TAG_UPDATE = 1, 2, 3, 4, 5, 6


def iid_partition(n_samples: int, n_clients: int, seed) -> list[np.ndarray]:
    """Shuffled near-equal split; every client gets at least one sample."""
    if n_samples < n_clients:
        raise ValueError(f"cannot split {n_samples} samples over {n_clients} clients")
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(n_samples), n_clients)
    return [np.sort(p) for p in parts]


def dirichlet_partition(labels, n_clients: int, alpha: float, seed) -> list[np.ndarray]:
    """Non-IID split: per-class client proportions drawn from Dirichlet(alpha).

    Allocations leaving a client empty are redrawn up to 100 times; as a last
    resort single samples are moved round-robin from the largest shards so the
    at-least-one-sample invariant always holds.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size < n_clients:
        raise ValueError(f"need >= {n_clients} labeled samples, got shape {labels.shape}")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    shards: list[list[int]] = []
    for _ in range(100):
        shards = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            proportions = rng.dirichlet(np.full(n_clients, float(alpha)))
            cuts = (np.cumsum(proportions)[:-1] * len(idx)).astype(int)
            for shard, part in zip(shards, np.split(idx, cuts)):
                shard.extend(part.tolist())
        if all(shards):
            break
    else:
        for k in range(n_clients):
            while not shards[k]:
                donor = max(range(n_clients), key=lambda j: len(shards[j]))
                shards[k].append(shards[donor].pop())
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


@dataclass
class ClientProfile:
    id: int
    mem_budget: float | None
    shard: np.ndarray


def embed_param_count(dims: StackDims) -> int:
    return dims.u * (dims.vocab if dims.vocab is not None else dims.feature_dim)


def layer_param_count(dims: StackDims) -> int:
    u, f = dims.u, dims.ffn_dim
    if dims.kind == "mlp":
        return 2 * u * f + f + 3 * u
    return 4 * u * u + 2 * u * f + f + 5 * u  # attn-lite


def adapter_param_count(dims: StackDims) -> int:
    return 2 * dims.u * dims.v


def head_param_count(dims: StackDims) -> int:
    return dims.u * dims.C + dims.C


@dataclass
class MemReport:
    params_bytes: int
    activation_bytes: int
    adapter_and_grad_bytes: int
    optimizer_bytes: int
    peak_bytes: int = field(init=False)
    shares: dict[str, float] = field(init=False)

    def __post_init__(self):
        self.peak_bytes = (self.params_bytes + self.activation_bytes
                           + self.adapter_and_grad_bytes + self.optimizer_bytes)
        self.shares = {
            "params": self.params_bytes / self.peak_bytes,
            "activations": self.activation_bytes / self.peak_bytes,
            "adapter_and_grad": self.adapter_and_grad_bytes / self.peak_bytes,
            "optimizer": self.optimizer_bytes / self.peak_bytes,
        }

    def as_dict(self) -> dict:
        return {
            "params_bytes": self.params_bytes,
            "activation_bytes": self.activation_bytes,
            "adapter_and_grad_bytes": self.adapter_and_grad_bytes,
            "optimizer_bytes": self.optimizer_bytes,
            "peak_bytes": self.peak_bytes,
            "shares": self.shares,
        }


def estimate_peak_memory(dims: StackDims, batch: int, seq_len: int, Q: int | None = None,
                         mode: str = "chain", precision_bytes: int = PRECISION_BYTES,
                         optimizer_multiplier: int = OPTIMIZER_MULTIPLIER) -> MemReport:
    """Closed-form per-device peak for one training step.

    Local heads are negligible (u*C + C per layer) and excluded; the trainable
    set counted is window adapters plus the final head.  Chain mode keeps the
    Q-layer window plus one streaming block resident; everything earlier is
    transient (recomputed or evicted after consumption).
    """
    if mode not in ("chain", "full"):
        raise ValueError(f"mode must be 'chain' or 'full', got {mode!r}")
    if batch < 1 or seq_len < 1:
        raise ValueError(f"bad batch={batch} / seq_len={seq_len}")
    p, k = precision_bytes, optimizer_multiplier
    if mode == "full":
        resident_layers, live_layers = dims.L, dims.L + 1
        trainable = dims.L * adapter_param_count(dims) + head_param_count(dims)
    else:
        if Q is None or not 1 <= Q <= dims.L:
            raise ValueError(f"chain mode needs Q in [1, {dims.L}], got {Q}")
        resident_layers, live_layers = min(Q + 1, dims.L), Q + 1
        trainable = Q * adapter_param_count(dims) + head_param_count(dims)
    return MemReport(
        params_bytes=p * (embed_param_count(dims) + resident_layers * layer_param_count(dims)),
        activation_bytes=p * batch * seq_len * dims.u * live_layers,
        adapter_and_grad_bytes=p * 2 * trainable,
        optimizer_bytes=k * p * trainable,
    )


def determine_Q(min_budget: float, dims: StackDims, batch: int, seq_len: int,
                L_start: int = 1, precision_bytes: int = PRECISION_BYTES,
                optimizer_multiplier: int = OPTIMIZER_MULTIPLIER) -> int:
    """Largest window size whose chain-mode peak fits the tightest budget."""
    span = dims.L - L_start + 1
    for q in range(span, 0, -1):
        report = estimate_peak_memory(dims, batch, seq_len, Q=q,
                                      precision_bytes=precision_bytes,
                                      optimizer_multiplier=optimizer_multiplier)
        if report.peak_bytes <= min_budget:
            return q
    raise ValueError(
        f"budget {min_budget} is below the Q=1 peak; this device cannot participate"
    )


def sample_clients(n_clients: int, count: int, round_idx: int, seed) -> list[int]:
    """Uniform sampling without replacement; deterministic in (seed, round)."""
    if not 1 <= count <= n_clients:
        raise ValueError(f"cannot sample {count} of {n_clients} clients")
    rng = np.random.default_rng([seed, _TAG_SAMPLE, round_idx])
    return sorted(rng.choice(n_clients, size=count, replace=False).tolist())


def aggregation_weights(sizes: list[int]) -> list[Fraction]:
    """Shard-size weights as exact rationals; they sum to exactly 1."""
    if not sizes or any(s <= 0 for s in sizes):
        raise ValueError(f"shard sizes must be positive, got {sizes}")
    total = sum(sizes)
    return [Fraction(s, total) for s in sizes]


def aggregate(stack: ModelStack, deltas: list[ParamDelta], sizes: list[int]) -> dict[str, np.ndarray]:
    """Apply the weighted-mean delta in place; deltas come in ascending client order."""
    if len(deltas) != len(sizes):
        raise ValueError("one shard size per delta required")
    keys = list(deltas[0].keys())
    for d in deltas[1:]:
        if list(d.keys()) != keys:
            raise ValueError(f"delta key sets differ: {sorted(set(d) ^ set(keys))}")
    weights = [float(w) for w in aggregation_weights(sizes)]
    params = named_parameters(stack)
    applied: dict[str, np.ndarray] = {}
    for key in keys:
        if key not in params:
            raise ValueError(f"unknown parameter name {key!r}")
        if len(deltas) == 1:
            update = deltas[0][key]
        else:
            update = np.zeros_like(deltas[0][key])
            for w, d in zip(weights, deltas):
                update = update + w * d[key]
        if update.shape != params[key].data.shape:
            raise ValueError(f"delta shape {update.shape} mismatches {key} {params[key].data.shape}")
        params[key].data = params[key].data + update
        applied[key] = update
    return applied


@dataclass
class RoundRecord:
    round: int
    window: tuple[int, int]
    clients: list[int]
    train_loss: float
    eval_accuracy: float
    comm_bytes: int
    peak_mem_bytes: int

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "window": list(self.window),
            "clients": self.clients,
            "train_loss": self.train_loss,
            "eval_accuracy": self.eval_accuracy,
            "comm_bytes": self.comm_bytes,
            "peak_mem_bytes": self.peak_mem_bytes,
        }


@dataclass
class RunResult:
    records: list[RoundRecord]
    stack: ModelStack
    L_start: int
    Q: int
    profile: CKAProfile | None
    clients: list[ClientProfile]

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].eval_accuracy if self.records else float("nan")


RUN_MODES = ("chainfed", "full_adapters", "linear_probing", "no_dlct", "no_gpo", "no_foat")

_SCHEMES = {"full_adapters": "all_adapters", "linear_probing": "final_only"}


def _serialized_bytes(delta: ParamDelta) -> int:
    # f32 on the wire, matching the checkpoint format
    return sum(4 * arr.size for arr in delta.values())


def _full_serialized_bytes(stack: ModelStack) -> int:
    return sum(4 * t.size for t in named_parameters(stack).values())


def run(cfg, dataset=None, mode: str | None = None, metrics_path=None,
        checkpoint_path=None, progress=None) -> RunResult:
    """Execute a federated experiment; see config.ExperimentConfig for knobs."""
    from .config import ExperimentConfig  # local import to keep layering acyclic
    from .data import load_dataset_from_config, train_eval_split

    assert isinstance(cfg, ExperimentConfig)
    mode = mode or cfg.mode
    if mode not in RUN_MODES:
        raise ValueError(f"unknown run mode {mode!r}")
    seed = cfg.model.seed

    if dataset is None:
        dataset = load_dataset_from_config(cfg.data, cfg.model, [seed, _TAG_DATA])
    dims = StackDims(
        L=cfg.model.L, u=cfg.model.u, v=cfg.model.v, C=dataset.C, kind=cfg.model.kind,
        ffn=cfg.model.ffn,
        vocab=dataset.vocab if dataset.kind == "tokens" else None,
        feature_dim=dataset.feature_dim if dataset.kind == "features" else None,
    )
    stack = build_stack(dims, seed=np.random.SeedSequence([seed, _TAG_STACK]),
                        init_scale=cfg.model.init_scale,
                        adapter_activation=cfg.model.adapter_activation)

    train_idx, eval_idx = train_eval_split(len(dataset.y), cfg.data.eval_fraction,
                                           [seed, _TAG_SPLIT])
    fed = cfg.federation
    if fed.partition == "iid":
        local_shards = iid_partition(len(train_idx), fed.N, [seed, _TAG_PARTITION])
    else:
        local_shards = dirichlet_partition(dataset.y[train_idx], fed.N, fed.alpha,
                                           [seed, _TAG_PARTITION])
    budgets = fed.budgets if fed.budgets is not None else [None] * fed.N
    clients = [ClientProfile(id=i, mem_budget=budgets[i], shard=train_idx[local_shards[i]])
               for i in range(fed.N)]

    seq_len = dataset.x.shape[1] if dataset.kind == "tokens" else 1

    # Phase 1: start layer from aggregated similarity profiles, Q from budgets
    profile = None
    if mode in ("no_foat", "full_adapters", "linear_probing"):
        L_start = 1
    elif cfg.chain.L_start is not None:
        L_start = cfg.chain.L_start
    else:
        per_client = []
        for c in clients:
            take = c.shard[: min(64, len(c.shard))]
            per_client.append(profile_layers(stack, dataset.x[take], c.mem_budget))
        profile = aggregate_profiles(per_client)
        L_start = select_start_layer(profile, cfg.chain.T)
    if mode == "no_dlct":
        Q = 1
    elif fed.Q is not None:
        Q = min(fed.Q, dims.L - L_start + 1)
    else:
        Q = determine_Q(min(fed.budgets), dims, cfg.chain.batch, seq_len, L_start=L_start)

    schedule = WindowSchedule(L_start, dims.L, Q)
    stage_cfg = StageLossConfig(
        lam=0.0 if mode == "no_gpo" else cfg.chain.lam,
        aux_adapters_trainable=cfg.chain.aux_adapters_trainable,
    )
    scheme = _SCHEMES.get(mode, "window")
    sample_count = fed.resolved_sample_count()

    if scheme == "window":
        peak = estimate_peak_memory(dims, cfg.chain.batch, seq_len, Q=Q).peak_bytes
    else:
        peak = estimate_peak_memory(dims, cfg.chain.batch, seq_len, mode="full").peak_bytes

    mutable = _mutable_parameters(stack)
    records: list[RoundRecord] = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for r in range(1, fed.rounds + 1):
            window = schedule.window_at_round(r) if scheme == "window" else (1, dims.L)
            participants = sample_clients(fed.N, sample_count, r, seed)
            snapshot = {name: t.data.copy() for name, t in mutable.items()}
            deltas, sizes, losses = [], [], []
            for cid in participants:
                for name, t in mutable.items():
                    t.data = snapshot[name].copy()
                shard = clients[cid].shard
                delta, info = local_update(
                    stack, dataset.x[shard], dataset.y[shard], window, stage_cfg,
                    steps=cfg.chain.local_steps, lr=cfg.chain.lr,
                    batch_size=cfg.chain.batch, seed=[seed, _TAG_UPDATE, r, cid],
                    scheme=scheme,
                )
                deltas.append(delta)
                sizes.append(len(shard))
                losses.append(info["mean_loss"])
            for name, t in mutable.items():
                t.data = snapshot[name]
            aggregate(stack, deltas, sizes)
            record = RoundRecord(
                round=r,
                window=window,
                clients=participants,
                train_loss=float(np.mean(losses)),
                eval_accuracy=evaluate_accuracy(stack, dataset.x[eval_idx], dataset.y[eval_idx]),
                comm_bytes=2 * len(participants) * _serialized_bytes(deltas[0]),
                peak_mem_bytes=peak,
            )
            records.append(record)
            if sink:
                sink.write(json.dumps(record.as_dict()) + "\n")
            if progress:
                progress(record)
    finally:
        if sink:
            sink.close()

    if checkpoint_path:
        from .checkpoint import save_checkpoint

        save_checkpoint(stack, checkpoint_path)
    return RunResult(records=records, stack=stack, L_start=L_start, Q=Q,
                     profile=profile, clients=clients)


def _mutable_parameters(stack: ModelStack) -> dict:
    params = named_parameters(stack)
    return {name: t for name, t in params.items()
            if name.startswith("layer.") or name.startswith("final_head.")}


def run_baseline(cfg, mode: str, **kwargs) -> RunResult:
    """Run an ablation or baseline under the same config and seed."""
    if mode not in RUN_MODES:
        raise ValueError(f"unknown baseline mode {mode!r}")
    return run(cfg, mode=mode, **kwargs)
