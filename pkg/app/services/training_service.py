"""Training, evaluation and ablation runs over a generated dataset."""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np
from sqlalchemy.orm import Session

from app.config import worker_count
from app.errors import TrainingAbortedError
from app.services.adaptive_mp import (
    PROPAGATION_ADAPTIVE, PROPAGATION_UNIFORM, SAMPLING_UP, SAMPLING_UP_DOWN,
    VALID_PROPAGATION_MODES, VALID_SAMPLING_MODES, MPSchedule, counted_steps,
    sampling_passes, scale_schedule, uniform_schedule,
)
from app.services.checkpoint_service import load_checkpoint, save_checkpoint
from app.services.dataset_service import (
    SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL, Dataset, Sample, prepare_sample,
)
from app.services.network import (
    ForwardInputs, ModelConfig, ModelParameters, Normalizer, OptimizerState,
    backward, count_parameters, estimate_flops, forward, init_parameters, learning_rate,
    mse_loss, optimizer_step, prepare_inputs,
)
from models import (
    EpochMetric, TrainingRun, RUN_STATUS_ABORTED, RUN_STATUS_COMPLETED, RUN_STATUS_RUNNING,
    session_for,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.json"
DEFAULT_ABLATION_BUDGET = 24


@dataclass(frozen=True)
class RunConfig:
    name: str = "ua_mgn"
    sampling_mode: str = SAMPLING_UP
    propagation_mode: str = PROPAGATION_ADAPTIVE
    R: int = 3
    K: int = 4
    total_steps: int | None = None
    epochs: int = 50
    seeds: tuple[int, ...] = (0,)
    latent: int = 128
    hidden: int = 128
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-4
    patience: int = 20
    normalize: bool = True

    def validate(self) -> None:
        if self.sampling_mode not in VALID_SAMPLING_MODES:
            raise ValueError(f"Unknown sampling mode: {self.sampling_mode}. Valid: {VALID_SAMPLING_MODES}")
        if self.propagation_mode not in VALID_PROPAGATION_MODES:
            raise ValueError(f"Unknown propagation mode: {self.propagation_mode}. Valid: {VALID_PROPAGATION_MODES}")
        if self.R < 1 or self.K < 1:
            raise ValueError(f"R and K must be >= 1, got R={self.R}, K={self.K}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def model_config(self, seed: int, output_dim: int = 1) -> ModelConfig:
        return ModelConfig(self.R, self.K, output_dim, self.latent, self.hidden, seed,
                           self.sampling_mode, self.normalize)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["seeds"] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown RunConfig fields: {sorted(unknown)}")
        data = dict(data)
        if "seeds" in data:
            data["seeds"] = tuple(int(s) for s in data["seeds"])
        config = cls(**data)
        config.validate()
        return config


def ablation_configs(budget: int = DEFAULT_ABLATION_BUDGET, R: int = 3, K: int = 4,
                     **overrides) -> list[RunConfig]:
    """The four adaptive/uniform x up/up-down cells plus the flat single-level baseline."""
    cells = [
        ("+A,U", PROPAGATION_ADAPTIVE, SAMPLING_UP),
        ("-A,U", PROPAGATION_UNIFORM, SAMPLING_UP),
        ("+A,U+D", PROPAGATION_ADAPTIVE, SAMPLING_UP_DOWN),
        ("-A,U+D", PROPAGATION_UNIFORM, SAMPLING_UP_DOWN),
    ]
    configs = [RunConfig(name=name, propagation_mode=prop, sampling_mode=samp, R=R, K=K,
                         total_steps=budget, **overrides) for name, prop, samp in cells]
    configs.append(RunConfig(name="flat", propagation_mode=PROPAGATION_UNIFORM, R=1, K=1,
                             total_steps=budget, **overrides))
    return configs


# ── Metric ───────────────────────────────────────────────────────────────

def rmse(predictions, targets, normalizer: Normalizer | None = None) -> float:
    """sqrt of the sample-mean of per-sample node-mean squared errors, in physical units.

    predictions are denormalized with normalizer when one is given.
    """
    predictions, targets = list(predictions), list(targets)
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions for {len(targets)} samples")
    if not targets:
        raise ValueError("rmse of an empty sample set")
    per_sample = []
    for i, (pred, true) in enumerate(zip(predictions, targets)):
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        pred = pred.reshape(pred.shape[0], -1)
        true = true.reshape(true.shape[0], -1)
        if normalizer is not None:
            pred = normalizer.denormalize_target(pred)
        if pred.shape != true.shape:
            raise ValueError(f"sample {i}: prediction shape {pred.shape} != target shape {true.shape}")
        per_sample.append(float(np.mean((true - pred) ** 2)))
    return math.sqrt(float(np.mean(per_sample)))


# ── Per-sample model inputs ──────────────────────────────────────────────

@dataclass(eq=False)
class PreparedSample:
    sample: Sample
    inputs: ForwardInputs
    schedule: MPSchedule
    target: np.ndarray


def schedule_for(sample: Sample, config: RunConfig) -> MPSchedule:
    """Tuned steps (adaptive) or an equal split (uniform), fitted to the step budget when one is set."""
    passes = sampling_passes(config.R, config.sampling_mode)
    if config.propagation_mode == PROPAGATION_UNIFORM:
        budget = config.total_steps
        if budget is None:
            budget = counted_steps(sample.schedule, config.sampling_mode)
        return uniform_schedule(config.R, config.K, budget, passes)
    if config.total_steps is None:
        return sample.schedule
    return scale_schedule(sample.schedule, config.total_steps, passes)


def prepare(dataset: Dataset, samples: list, config: RunConfig) -> list[PreparedSample]:
    prepared = []
    for sample in samples:
        sample = prepare_sample(dataset.spec, sample, config.R, config.K)
        inputs = prepare_inputs(sample.multilevel, sample.partitions, dataset.normalizer)
        target = dataset.normalizer.normalize_target(sample.target)
        prepared.append(PreparedSample(sample, inputs, schedule_for(sample, config), target))
    return prepared


def predict(params: ModelParameters, item: PreparedSample) -> np.ndarray:
    output, _ = forward(item.inputs, item.schedule, params, record=False, workers=1)
    return output


def evaluate_prepared(params: ModelParameters, normalizer: Normalizer, items: list,
                      workers: int | None = None) -> float:
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        outputs = list(pool.map(lambda item: predict(params, item), items))
    return rmse(outputs, [item.sample.target for item in items], normalizer)


# ── Training ─────────────────────────────────────────────────────────────

@dataclass
class TrainResult:
    checkpoint_path: str
    best_epoch: int
    best_val_rmse: float
    history: list = field(default_factory=list)
    params: int = 0
    flops: int = 0
    steps_per_forward: int = 0


def train(dataset: Dataset, config: RunConfig, out_dir, seed: int | None = None,
          on_epoch=None) -> TrainResult:
    """Train on the train split, keep the best-validation checkpoint.

    on_epoch(epoch, train_rmse, val_rmse) is called after every epoch (epoch 0 = initial model).
    """
    config.validate()
    seed = config.seeds[0] if seed is None else int(seed)
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)

    train_items = prepare(dataset, dataset.split(SPLIT_TRAIN), config)
    val_items = prepare(dataset, dataset.split(SPLIT_VAL), config) or train_items
    if not train_items:
        raise ValueError("the train split is empty")

    params = init_parameters(config.model_config(seed))
    normalizer = dataset.normalizer
    reference = train_items[0]
    steps_per_forward = counted_steps(reference.schedule, config.sampling_mode)
    result = TrainResult(checkpoint_path, 0, math.inf, [], count_parameters(params),
                         estimate_flops(reference.inputs, reference.schedule, params), steps_per_forward)

    def checkpoint(epoch, val):
        save_checkpoint(params, normalizer, checkpoint_path,
                        {"run_config": config.to_dict(), "dataset_spec": dataset.spec.to_dict(),
                         "dataset_path": os.path.abspath(dataset.path) if dataset.path else None,
                         "seed": seed, "epoch": epoch, "val_rmse": val})

    initial_val = evaluate_prepared(params, normalizer, val_items)
    initial_train = evaluate_prepared(params, normalizer, train_items)
    result.history.append({"epoch": 0, "train": initial_train, "val": initial_val})
    result.best_val_rmse = initial_val
    checkpoint(0, initial_val)
    if on_epoch:
        on_epoch(0, initial_train, initial_val)

    rng = np.random.default_rng(seed)
    optimizer = OptimizerState()
    total_updates = max(1, config.epochs * len(train_items))
    waited = 0
    for epoch in range(1, config.epochs + 1):
        squared = []
        for idx in rng.permutation(len(train_items)):
            item = train_items[idx]
            output, state = forward(item.inputs, item.schedule, params)
            if state.steps_executed != counted_steps(item.schedule, config.sampling_mode):
                raise TrainingAbortedError(
                    f"forward executed {state.steps_executed} steps, schedule counts "
                    f"{counted_steps(item.schedule, config.sampling_mode)}", checkpoint_path)
            loss, d_output = mse_loss(output, item.target)
            if not math.isfinite(loss):
                logger.error(f"Non-finite loss at epoch {epoch}, sample {item.sample.spec.index}")
                raise TrainingAbortedError(
                    f"non-finite loss {loss} at epoch {epoch} on sample {item.sample.spec.index}",
                    checkpoint_path)
            physical = normalizer.denormalize_target(output) - item.sample.target
            squared.append(float(np.mean(physical ** 2)))
            grads = backward(state, d_output)
            lr = learning_rate(optimizer.step, total_updates, config.learning_rate, config.final_learning_rate)
            optimizer_step(params.arrays, grads, optimizer, lr=lr)

        train_rmse = math.sqrt(float(np.mean(squared)))
        val_rmse = evaluate_prepared(params, normalizer, val_items)
        result.history.append({"epoch": epoch, "train": train_rmse, "val": val_rmse})
        logger.info(f"[{config.name} seed {seed}] epoch {epoch}: train RMSE {train_rmse:.4f}, "
                    f"val RMSE {val_rmse:.4f}")
        if on_epoch:
            on_epoch(epoch, train_rmse, val_rmse)
        if val_rmse < result.best_val_rmse:
            result.best_val_rmse = val_rmse
            result.best_epoch = epoch
            checkpoint(epoch, val_rmse)
            waited = 0
        else:
            waited += 1
            if waited >= config.patience:
                logger.info(f"[{config.name} seed {seed}] early stop at epoch {epoch}")
                break
    return result


def evaluate(checkpoint_path, dataset: Dataset, split: str = SPLIT_TEST) -> dict:
    """RMSE report of a saved checkpoint on one split."""
    params, normalizer, manifest = load_checkpoint(checkpoint_path)
    run_config = RunConfig.from_dict(manifest.get("extra", {}).get("run_config", {
        "R": params.config.R, "K": params.config.K, "sampling_mode": params.config.sampling_mode,
    }))
    items = prepare(dataset, dataset.split(split), run_config)
    if not items:
        raise ValueError(f"split '{split}' is empty")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        outputs = list(pool.map(lambda item: predict(params, item), items))
    per_sample = [rmse([out], [item.sample.target], normalizer) for out, item in zip(outputs, items)]
    return {
        "checkpoint": str(checkpoint_path),
        "split": split,
        "samples": len(items),
        "rmse": rmse(outputs, [item.sample.target for item in items], normalizer),
        "per_sample": [{"index": item.sample.spec.index, "rmse": value}
                       for item, value in zip(items, per_sample)],
    }


# ── Orchestrator (DB integration) ────────────────────────────────────────

def run_id_for(config: RunConfig, seed: int) -> str:
    return f"{config.name}-R{config.R}-K{config.K}-{config.propagation_mode}-{config.sampling_mode}-s{seed}"


def run_and_store(dataset: Dataset, config: RunConfig, out_dir, seed: int | None = None,
                  db: Session | None = None) -> TrainingRun:
    """Train one (config, seed), evaluate on test and store the TrainingRun with its epoch metrics."""
    seed = config.seeds[0] if seed is None else int(seed)
    own_session = db is None
    db = db or session_for(out_dir)
    run = TrainingRun(
        run_id=run_id_for(config, seed),
        name=config.name,
        sampling_mode=config.sampling_mode,
        propagation_mode=config.propagation_mode,
        R=config.R,
        K=config.K,
        total_steps=config.total_steps,
        seed=seed,
        epochs=config.epochs,
        status=RUN_STATUS_RUNNING,
        config_json=json.dumps(config.to_dict(), sort_keys=True),
        started_at=datetime.utcnow(),
    )
    existing = db.query(TrainingRun).filter(TrainingRun.run_id == run.run_id).first()
    if existing is not None:
        db.delete(existing)
        db.flush()
    db.add(run)
    db.flush()

    def log_epoch(epoch, train_rmse, val_rmse):
        db.add(EpochMetric(run_pk=run.id, epoch=epoch, split="train", rmse=train_rmse))
        db.add(EpochMetric(run_pk=run.id, epoch=epoch, split="val", rmse=val_rmse))
        db.flush()

    try:
        result = train(dataset, config, out_dir, seed, on_epoch=log_epoch)
        report = evaluate(result.checkpoint_path, dataset, SPLIT_TEST) if dataset.splits[SPLIT_TEST] else None
        run.params = result.params
        run.flops = result.flops
        run.best_epoch = result.best_epoch
        run.best_val_rmse = result.best_val_rmse
        run.checkpoint_path = result.checkpoint_path
        if report is not None:
            run.test_rmse = report["rmse"]
            db.add(EpochMetric(run_pk=run.id, epoch=result.best_epoch, split="test", rmse=report["rmse"]))
        run.status = RUN_STATUS_COMPLETED
    except Exception as e:
        run.status = RUN_STATUS_ABORTED
        run.error_message = f"{type(e).__name__}: {e}"
        run.checkpoint_path = getattr(e, "checkpoint_path", run.checkpoint_path)
        raise
    finally:
        run.finished_at = datetime.utcnow()
        db.commit()
        if own_session:
            db.refresh(run)
            db.expunge(run)
            db.close()
    logger.info(f"Run {run.run_id}: test RMSE {run.test_rmse}, params {run.params}, flops {run.flops}")
    return run


def ablate(dataset: Dataset, configs: list, out_dir, seeds=None) -> dict:
    """Train every config for every seed at one shared step budget and compare median test RMSE."""
    configs = list(configs)
    budgets = {c.total_steps for c in configs}
    if len(budgets) != 1 or None in budgets:
        raise ValueError(f"ablation configs must share one explicit total_steps budget, got {sorted(map(str, budgets))}")
    db = session_for(out_dir)
    rows = []
    try:
        for config in configs:
            for seed in (seeds or config.seeds):
                run_dir = os.path.join(str(out_dir), config.name.replace(",", "_").replace("+", "p").replace("-", "m"),
                                       f"seed_{seed}")
                run = run_and_store(dataset, config, run_dir, seed, db=db)
                rows.append({"run_id": run.run_id, "name": config.name, "seed": int(seed),
                             "test_rmse": run.test_rmse, "params": run.params, "flops": run.flops})
    finally:
        db.close()

    medians = {}
    for config in configs:
        values = [r["test_rmse"] for r in rows if r["name"] == config.name and r["test_rmse"] is not None]
        medians[config.name] = float(np.median(values)) if values else None
    ordering = check_ordering(medians)
    return {"budget": budgets.pop(), "rows": rows, "medians": medians, "ordering": ordering}


def check_ordering(medians: dict) -> dict:
    """Soft comparison of the adaptive up-sampling cell against its ablations; failures are logged."""
    checks = {}
    anchor = medians.get("+A,U")
    for other in ("-A,U", "+A,U+D", "flat"):
        value = medians.get(other)
        if anchor is None or value is None:
            continue
        holds = anchor <= value
        checks[f"+A,U <= {other}"] = holds
        if not holds:
            logger.warning(f"Ablation ordering not reproduced: +A,U median {anchor:.4f} > {other} {value:.4f}")
    return checks
