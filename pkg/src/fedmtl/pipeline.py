"""Experiment regimes: the layered transfer pipeline and the four baselines."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from fedmtl.data import ClientDataset
from fedmtl.federation import GlobalState, RoundPlan, derive_seed, local_train, run_round
from fedmtl.metrics import MetricsReport, StageResult, TaskResult, confusion
from fedmtl.model import LayerGroup, Model, ModelConfig, build_model, forward, trainable_mask

log = logging.getLogger(__name__)

REGIMES = ("centralized_bulk", "individual", "federated_one_task", "federated_multi_task",
           "layered_transfer")

PRETRAIN = "PreTrain"
COMMON = "Common"
PERSONALIZE = "Personalize"


def task_specific_stage(task: str) -> str:
    return f"TaskSpecific({task})"


@dataclass
class TrainingConfig:
    lr: float = 0.05
    batch_size: int = 16
    local_epochs: int = 2
    rounds: int = 10  # federated baselines
    epochs: int = 30  # individual and centralized baselines
    participation: float = 1.0


@dataclass
class StagePlanConfig:
    pretrain_client: str | None = None
    pretrain_epochs: int = 15
    common_rounds: int = 10
    task_rounds: int = 10
    personalize_epochs: int = 5


@dataclass
class Stage:
    name: str
    group: LayerGroup
    task: str | None
    participants: list[str]
    rounds: int  # epochs for the non-federated stages
    local_epochs: int
    lr: float


@dataclass
class ExperimentSpec:
    model: ModelConfig
    clients: dict[str, ClientDataset]
    regimes: list[str] = field(default_factory=lambda: ["layered_transfer"])
    tasks: list[str] | None = None  # one-task regimes; default every configured task
    training: TrainingConfig = field(default_factory=TrainingConfig)
    stages: StagePlanConfig = field(default_factory=StagePlanConfig)
    seed: int = 7
    workers: int = 1

    @property
    def task_list(self) -> list[str]:
        return list(self.tasks) if self.tasks else self.model.tasks

    def cohort(self, task: str) -> list[str]:
        return sorted(c for c, ds in self.clients.items() if ds.task_availability.get(task, False))


def round_seed(seed: int, tag: str, r: int) -> int:
    return derive_seed(seed, tag, r)


def client_seed(seed: int, tag: str, r: int, client_id: str) -> int:
    """Seed ``run_round`` hands to ``client_id`` in round ``r`` of ``tag``."""
    return derive_seed(round_seed(seed, tag, r), client_id)


# --- evaluation ---------------------------------------------------------------

def evaluate_client(config: ModelConfig, params: dict[str, np.ndarray], client: ClientDataset,
                    tasks) -> dict[str, TaskResult]:
    out = {}
    if not client.test:
        return out
    X, Y = client.arrays("test", config.tasks)
    logits = forward(Model(config, params), X)
    for task in tasks:
        if not client.task_availability.get(task, False):
            continue
        sel = Y[task] >= 0
        if not sel.any():
            continue
        pred = np.argmax(logits[task][sel], axis=-1)
        cm = confusion(pred, Y[task][sel], config.heads[task], task)
        out[task] = TaskResult(cm.accuracy, int(sel.sum()), cm.counts.tolist())
    return out


def evaluate_state(state: GlobalState, clients: dict[str, ClientDataset], tasks, stage: str) -> StageResult:
    res = StageResult(stage)
    for cid in sorted(clients):
        r = evaluate_client(state.config, state.materialize(cid), clients[cid], tasks)
        if r:
            res.clients[cid] = r
    return res


def _report(regime: str, spec: ExperimentSpec, stages: list[StageResult]) -> MetricsReport:
    meta = {"seed": spec.seed, "model_digest": spec.model.digest(), "regime": regime}
    return MetricsReport(regime, stages, meta)


def _sample(spec: ExperimentSpec, cohort: list[str], tag: str, r: int) -> list[str]:
    f = spec.training.participation
    if f >= 1.0:
        return list(cohort)
    k = max(1, math.ceil(f * len(cohort)))
    rng = np.random.default_rng(derive_seed(spec.seed, "sample", tag, r))
    return sorted(rng.choice(cohort, size=k, replace=False).tolist())


def _federate(spec, state, cohort, mask, rounds, tag, tasks=None, required_task=None,
              clients=None) -> GlobalState:
    t = spec.training
    clients = spec.clients if clients is None else clients
    for r in range(rounds):
        plan = RoundPlan(_sample(spec, cohort, tag, r), mask, t.local_epochs, t.lr, t.batch_size,
                         tasks, required_task)
        state = run_round(state, plan, clients, round_seed(spec.seed, tag, r), spec.workers)
    return state


# --- baselines ----------------------------------------------------------------

def run_individual(spec: ExperimentSpec, task: str):
    """Each cohort client trains a private model on its own data.

    Returns ``(report, {client_id: params})``.
    """
    cohort = spec.cohort(task)
    if not cohort:
        raise ValueError(f"no client has task {task!r} available")
    init = build_model(spec.model, spec.seed).params
    stage = StageResult("final")
    models = {}
    for cid in cohort:
        t = spec.training
        upd = local_train(spec.model, task_view(spec.clients[cid], task), init, None, t.epochs, t.lr,
                          t.batch_size, client_seed(spec.seed, task, 0, cid), [task])
        models[cid] = upd.params
        stage.clients[cid] = evaluate_client(spec.model, upd.params, spec.clients[cid], [task])
    return _report(f"individual:{task}", spec, [stage]), models


def task_view(client: ClientDataset, task: str) -> ClientDataset:
    """The client's samples labelled for ``task`` only."""
    return pooled_client([client], task)


def pooled_client(clients: list[ClientDataset], task: str) -> ClientDataset:
    cid = "+".join(c.client_id for c in clients)
    train = [s for c in clients for s in c.train if task in s.labels]
    test = [s for c in clients for s in c.test if task in s.labels]
    return ClientDataset(cid, train, test, {task: True})


def run_centralized_bulk(spec: ExperimentSpec, task: str):
    """One model trained on the pooled train data of every client with the task.

    Evaluated per client on the same model, so the weighted average equals the
    pooled test accuracy.  Returns ``(report, params)``.
    """
    cohort = spec.cohort(task)
    if not cohort:
        raise ValueError(f"no labelled data for task {task!r}")
    pooled = pooled_client([spec.clients[c] for c in cohort], task)
    init = build_model(spec.model, spec.seed).params
    upd = local_train(spec.model, pooled, init, None, spec.training.epochs, spec.training.lr,
                      spec.training.batch_size, client_seed(spec.seed, task, 0, pooled.client_id), [task])
    stage = StageResult("final")
    for cid in cohort:
        stage.clients[cid] = evaluate_client(spec.model, upd.params, spec.clients[cid], [task])
    return _report(f"centralized_bulk:{task}", spec, [stage]), upd.params


def run_federated_one_task(spec: ExperimentSpec, task: str, rounds: int | None = None):
    """FedAvg over the task's cohort, full model trainable, only that head in the loss."""
    cohort = spec.cohort(task)
    if not cohort:
        raise ValueError(f"no client has task {task!r} available")
    rounds = spec.training.rounds if rounds is None else rounds
    state = GlobalState.from_params(spec.model, build_model(spec.model, spec.seed).params, sorted(spec.clients))
    mask = trainable_mask(spec.model, LayerGroup.PRETRAINED)
    views = {c: task_view(spec.clients[c], task) for c in cohort}
    state = _federate(spec, state, cohort, mask, rounds, task, [task], task, clients=views)
    stage = evaluate_state(state, {c: spec.clients[c] for c in cohort}, [task], "final")
    return _report(f"federated_one_task:{task}", spec, [stage]), state


def run_federated_multi_task(spec: ExperimentSpec, rounds: int | None = None):
    """FedAvg over every client; each trains the heads it has labels for."""
    if not spec.clients:
        raise ValueError("no clients")
    rounds = spec.training.rounds if rounds is None else rounds
    state = GlobalState.from_params(spec.model, build_model(spec.model, spec.seed).params, sorted(spec.clients))
    mask = trainable_mask(spec.model, LayerGroup.PRETRAINED)
    state = _federate(spec, state, sorted(spec.clients), mask, rounds, "multi_task")
    stage = evaluate_state(state, spec.clients, spec.model.tasks, "final")
    return _report("federated_multi_task", spec, [stage]), state


# --- layered transfer -------------------------------------------------------------

def default_pretrain_client(clients: dict[str, ClientDataset], tasks) -> str:
    """Client with the most distinct position classes (ties: most samples, then id)."""
    pos_task = tasks[-1] if len(tasks) > 1 else tasks[0]

    def score(cid):
        ds = clients[cid]
        distinct = {s.labels[pos_task] for s in ds.train + ds.test if pos_task in s.labels}
        return (-len(distinct), -ds.n_k, cid)

    return min(clients, key=score)


def stage_plan(spec: ExperimentSpec) -> list[Stage]:
    sc, t = spec.stages, spec.training
    pre = sc.pretrain_client or default_pretrain_client(spec.clients, spec.model.tasks)
    if pre not in spec.clients:
        raise ValueError(f"pre-training client {pre!r} not found")
    everyone = sorted(spec.clients)
    stages = [
        Stage(PRETRAIN, LayerGroup.PRETRAINED, None, [pre], sc.pretrain_epochs, sc.pretrain_epochs, t.lr),
        Stage(COMMON, LayerGroup.COMMON, None, everyone, sc.common_rounds, t.local_epochs, t.lr),
    ]
    for task in spec.model.tasks:
        cohort = spec.cohort(task)
        if not cohort:
            log.warning("no client has task %s; skipping its task-specific stage", task)
            continue
        stages.append(Stage(task_specific_stage(task), LayerGroup.TASK_SPECIFIC, task, cohort,
                            sc.task_rounds, t.local_epochs, t.lr))
    stages.append(Stage(PERSONALIZE, LayerGroup.PERSONALIZED, None, everyone,
                        sc.personalize_epochs, sc.personalize_epochs, t.lr))
    validate_plan(stages, spec)
    return stages


def validate_plan(stages: list[Stage], spec: ExperimentSpec) -> None:
    levels = [s.group for s in stages]
    if levels != sorted(levels) or stages[0].name != PRETRAIN or stages[-1].name != PERSONALIZE:
        raise ValueError("stages must run PreTrain -> Common -> TaskSpecific -> Personalize")
    for s in stages:
        if s.task is not None:
            bad = [c for c in s.participants if not spec.clients[c].task_availability.get(s.task, False)]
            if bad:
                raise ValueError(f"{s.name}: participants {bad} lack task {s.task}")


def run_layered(spec: ExperimentSpec, on_stage: Callable[[str, GlobalState], None] | None = None):
    """Pre-train, then federate common and task-specific groups, then personalise.

    Every group is frozen once its stage is over.  All clients are evaluated
    after each stage.  Returns ``(final_state, report)``.
    """
    stages = stage_plan(spec)
    tasks = spec.model.tasks
    everyone = sorted(spec.clients)
    history = []
    state = None
    t = spec.training
    for st in stages:
        mask = trainable_mask(spec.model, st.group, st.task)
        if st.name == PRETRAIN:
            pre = spec.clients[st.participants[0]]
            init = build_model(spec.model, spec.seed).params
            upd = local_train(spec.model, pre, init, mask, st.rounds, st.lr, t.batch_size,
                              derive_seed(spec.seed, PRETRAIN))
            state = GlobalState.from_params(spec.model, upd.params, everyone)
        elif st.name == PERSONALIZE:
            new = state.copy()
            names = [k for k, v in mask.items() if v]
            for cid in st.participants:
                upd = local_train(spec.model, spec.clients[cid], state.materialize(cid), mask, st.rounds,
                                  st.lr, t.batch_size, derive_seed(spec.seed, PERSONALIZE, cid))
                new.write_back(upd.params, names, [cid])
            state = new
        else:
            loss_tasks = [st.task] if st.task else None
            state = _federate(spec, state, st.participants, mask, st.rounds, st.name, loss_tasks, st.task)
        history.append(evaluate_state(state, spec.clients, tasks, st.name))
        if on_stage is not None:
            on_stage(st.name, state)
    return state, _report("layered_transfer", spec, history)


def client_models(state: GlobalState) -> dict[str, Model]:
    return {cid: Model(state.config, state.materialize(cid)) for cid in sorted(state.per_client)}
