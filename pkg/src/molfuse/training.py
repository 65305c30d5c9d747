"""Training loops, metrics, multi-seed aggregation, and timing profiles."""

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tape, backward, constant
from .checkpoint import save_checkpoint
from .data import (
    PROTOCOL_SEEDS,
    SplitSpec,
    TaskKind,
    batch_iter,
    load_csv,
    naive_baseline,
    split,
)
from .gnn import GnnConfig
from .integration import ContrastConfig, EncodedMolecule, IntegratedModel
from .lm import EncoderConfig, run_mlm_pretraining
from .optim import AdamState, adam_step
from .smiles import Vocabulary, parse, tokenize

DEFAULT_LABEL_COLUMNS = {"regression": "log_solubility",
                         "binary-classification": "p_np"}


@dataclass
class RunConfig:
    strategy: str = "lm-baseline"
    dataset: str = "data/esol.csv"
    task: str = "regression"
    smiles_column: str = "smiles"
    label_column: str = ""  # empty = task default
    ratios: tuple = (0.8, 0.1, 0.1)
    seeds: tuple = PROTOCOL_SEEDS
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    fusion: str = "sum"
    alpha: float = 0.1
    alpha_graph: float = 0.1
    margin: float = 1.0
    hidden_dim: int = 64
    num_layers: int = 3
    num_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 256
    gnn_variant: str = "mpnn"
    message_steps: int = 3
    graphconv_layers: int = 2
    update_kind: str = "gru"
    edge_hidden: int = 64
    mlm_pretrain: bool = False
    mlm_epochs: int = 3
    mlm_rate: float = 0.15
    frozen_mpnn: bool = False
    cross_graph_negatives: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        for name in ("lr", "batch_size", "max_epochs", "patience", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.label_column:
            self.label_column = DEFAULT_LABEL_COLUMNS[self.task]

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["ratios"] = list(self.ratios)
        out["seeds"] = list(self.seeds)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "ratios" in data:
            data["ratios"] = tuple(data["ratios"])
        if "seeds" in data:
            data["seeds"] = tuple(data["seeds"])
        return cls(**data)

    def encoder_config(self, vocab_size):
        return EncoderConfig(
            vocab_size=vocab_size, hidden_dim=self.hidden_dim,
            num_layers=self.num_layers, num_heads=self.num_heads,
            ffn_dim=self.ffn_dim, max_len=self.max_len,
        )

    def gnn_config(self):
        return GnnConfig(
            hidden_dim=self.hidden_dim, message_steps=self.message_steps,
            variant=self.gnn_variant, graphconv_layers=self.graphconv_layers,
            update_kind=self.update_kind, edge_hidden=self.edge_hidden,
        )

    def contrast_config(self):
        return ContrastConfig(
            margin=self.margin, alpha=self.alpha, alpha_graph=self.alpha_graph
        )


@dataclass
class SeedResult:
    seed: int
    test_metric: float = math.nan
    best_epoch: int = -1
    best_val_metric: float = math.nan
    val_history: list = field(default_factory=list)
    epochs_run: int = 0
    naive_metric: float = math.nan
    epoch_times: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    failed: bool = False
    failure_reason: str = ""

    def to_record(self):
        rec = {
            "type": "seed",
            "seed": self.seed,
            "test_metric": self.test_metric,
            "best_epoch": self.best_epoch,
            "best_val_metric": self.best_val_metric,
            "val_history": self.val_history,
            "epochs_run": self.epochs_run,
            "naive_metric": self.naive_metric,
            "counters": self.counters,
            "failed": self.failed,
            "failure_reason": self.failure_reason,
            "timing": {"epoch_times": self.epoch_times},
        }
        return rec


@dataclass
class RunReport:
    config: dict
    results: list

    @property
    def successes(self):
        return [r for r in self.results if not r.failed]

    def aggregate(self):
        """(mean, sample std) of the test metric over successful seeds."""
        metrics = [r.test_metric for r in self.successes]
        if not metrics:
            return math.nan, math.nan
        mean = sum(metrics) / len(metrics)
        if len(metrics) < 2:
            return mean, 0.0
        var = sum((m - mean) ** 2 for m in metrics) / (len(metrics) - 1)
        return mean, math.sqrt(var)

    def formatted_aggregate(self):
        mean, std = self.aggregate()
        return f"{mean:.4f} ± {std:.4f}"

    def text_table(self):
        metric = "mae" if self.config.get("task") == "regression" else "accuracy"
        lines = [
            f"strategy: {self.config.get('strategy')}   "
            f"dataset: {self.config.get('dataset')}   metric: {metric}",
            f"{'seed':>6}  {metric:>10}  {'naive':>10}  {'best epoch':>10}",
        ]
        for r in self.results:
            if r.failed:
                lines.append(f"{r.seed:>6}  {'FAILED':>10}  ({r.failure_reason})")
            else:
                lines.append(
                    f"{r.seed:>6}  {r.test_metric:>10.4f}  "
                    f"{r.naive_metric:>10.4f}  {r.best_epoch:>10}"
                )
        lines.append(f"aggregate: {self.formatted_aggregate()}")
        if len(self.successes) != len(self.results):
            lines.append("warning: aggregate computed over successful seeds only")
        return "\n".join(lines)

    def jsonl(self):
        lines = [json.dumps(r.to_record(), sort_keys=True) for r in self.results]
        mean, std = self.aggregate()
        lines.append(json.dumps(
            {"type": "aggregate", "mean": mean, "std": std,
             "formatted": self.formatted_aggregate(),
             "n_success": len(self.successes)},
            sort_keys=True,
        ))
        return "\n".join(lines)

    def comparable_records(self):
        """Per-seed records with wall-clock timing stripped (determinism
        checks compare these; elapsed time is the one non-reproducible
        field)."""
        out = []
        for r in self.results:
            rec = r.to_record()
            rec.pop("timing")
            out.append(rec)
        return out


def _mix(*parts):
    state = 0x9E3779B97F4A7C15
    for p in parts:
        state = (state ^ (int(p) + 0x9E3779B97F4A7C15)) * 0xBF58476D1CE4E5B9
        state &= (1 << 64) - 1
    return state >> 11


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def evaluate(model, mols, task, batch_size=64):
    """MAE (regression) or accuracy at logistic threshold 0.5."""
    if not mols:
        raise ValueError("evaluate: empty subset")
    preds = []
    for lo in range(0, len(mols), batch_size):
        preds.append(model.predict(mols[lo:lo + batch_size]))
    preds = np.concatenate(preds)
    labels = np.asarray([m.label for m in mols])
    if task.kind == "regression":
        return float(np.abs(preds - labels).mean())
    decisions = (logistic(preds) >= 0.5).astype(np.float64)
    return float((decisions == labels).mean())


def prepare_molecules(records, vocab, max_len):
    """EncodedMolecule list; over-long sequences are dropped and counted."""
    mols = []
    dropped = 0
    unknown = 0
    for rec in records:
        seq = tokenize(rec.smiles, vocab)
        if len(seq) > max_len:
            dropped += 1
            continue
        unknown += seq.unknown_tokens
        mols.append(EncodedMolecule(parse(rec.smiles), seq, rec.label))
    return mols, dropped, unknown


def build_model(config, vocab_size, seed):
    return IntegratedModel(
        config.strategy,
        vocab_size=vocab_size,
        seed=seed,
        encoder_config=config.encoder_config(vocab_size),
        gnn_config=config.gnn_config(),
        fusion=config.fusion,
        contrast=config.contrast_config(),
        task_kind=config.task,
        frozen_mpnn=config.frozen_mpnn,
        cross_graph_negatives=config.cross_graph_negatives,
    )


def _full_gradients(params, grads):
    return {
        p.node_id: grads.get(p.node_id, np.zeros_like(p.values)) for p in params
    }


def train_one(config, seed, out_dir=None, load_result=None):
    """One full protocol run for one seed.

    split -> (optional MLM stage) -> epoch loop with Adam -> early stop on
    the validation metric -> test metric from the best-validation
    snapshot. A NaN loss aborts the run and is recorded as a failure.
    """
    kernels.warmup()
    task = TaskKind(config.task)
    result = SeedResult(seed=seed)
    data = load_result or load_csv(
        config.dataset, config.smiles_column, config.label_column, task
    )
    train_recs, valid_recs, test_recs = split(
        data.records, SplitSpec(config.ratios, seed)
    )
    result.naive_metric = naive_baseline(train_recs, test_recs, task)
    vocab = Vocabulary.build(r.smiles for r in train_recs)
    train_mols, dropped_a, unk_a = prepare_molecules(
        train_recs, vocab, config.max_len
    )
    valid_mols, dropped_b, unk_b = prepare_molecules(
        valid_recs, vocab, config.max_len
    )
    test_mols, dropped_c, unk_c = prepare_molecules(test_recs, vocab, config.max_len)
    result.counters = {
        "quarantined": len(data.quarantined),
        "parse_warnings": data.warnings,
        "dropped_too_long": dropped_a + dropped_b + dropped_c,
        "unknown_tokens": unk_a + unk_b + unk_c,
        "vocab_size": len(vocab),
    }

    model = build_model(config, len(vocab), seed)
    if config.mlm_pretrain and model.encoder is not None:
        losses, skipped = run_mlm_pretraining(
            model.encoder, [m.tokens for m in train_mols],
            epochs=config.mlm_epochs, batch_size=config.batch_size,
            lr=config.lr, mask_rate=config.mlm_rate, seed=_mix(seed, 0xA11),
        )
        result.counters["mlm_batches"] = len(losses)
        result.counters["mlm_skipped"] = skipped

    params = model.parameters()
    state = AdamState(params, lr=config.lr)
    best_state = model.state_dict()
    best_val = None
    stale = 0
    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        for b, batch in enumerate(
            batch_iter(train_mols, config.batch_size, _mix(seed, epoch))
        ):
            tape = Tape()
            loss, _, _ = model.forward_batch(
                tape, batch, batch_seed=_mix(seed, epoch, b)
            )
            if not np.isfinite(loss.values):
                result.failed = True
                result.failure_reason = f"non-finite loss at epoch {epoch}"
                result.epochs_run = epoch
                return model, result
            grads = backward(loss, tape)
            adam_step(params, _full_gradients(params, grads), state)
        val_metric = evaluate(model, valid_mols, task)
        result.val_history.append(val_metric)
        result.epoch_times.append(time.perf_counter() - started)
        better = best_val is None or (
            val_metric > best_val if task.higher_is_better else val_metric < best_val
        )
        if better:
            best_val = val_metric
            best_state = model.state_dict()
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if stale >= config.patience:
            break
    result.epochs_run = len(result.val_history)
    result.best_val_metric = best_val if best_val is not None else math.nan
    model.load_state_dict(best_state)
    result.test_metric = evaluate(model, test_mols, task)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(
            os.path.join(out_dir, f"checkpoint_seed{seed}.bin"),
            {"seed": seed, **config.to_dict()},
            model.state_dict(),
        )
    return model, result


def _train_seed_entry(config_dict, seed, out_dir):
    config = RunConfig.from_dict(config_dict)
    _, result = train_one(config, seed, out_dir=out_dir)
    return result


def run_seeds(config, out_dir=None):
    """Full protocol over config.seeds; aggregate is mean +/- sample std.

    Seeds run on parallel workers when config.workers > 1; results are
    ordered by the configured seed list either way.
    """
    if config.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(_train_seed_entry, config.to_dict(), seed, out_dir)
                for seed in config.seeds
            ]
            results = [f.result() for f in futures]
    else:
        results = []
        data = load_csv(
            config.dataset, config.smiles_column, config.label_column,
            TaskKind(config.task),
        )
        for seed in config.seeds:
            _, result = train_one(config, seed, out_dir=out_dir, load_result=data)
            results.append(result)
    return RunReport(config=config.to_dict(), results=results)


# ---------------------------------------------------------------------------
# timing profile
# ---------------------------------------------------------------------------

def profile_strategies(config, strategies, measured_epochs=5, warmup_epochs=1,
                       seed=0):
    """Median per-epoch training wall time per strategy, plus the ordering
    verdicts (violations are reported, never raised).

    Strategies advance one epoch at a time in rotation so slow machine
    drift hits them symmetrically, and the garbage collector pauses during
    measured epochs (tape churn otherwise triggers collector scans at
    arbitrary points).
    """
    import gc

    kernels.warmup()
    task = TaskKind(config.task)
    data = load_csv(config.dataset, config.smiles_column, config.label_column, task)
    train_recs, _, _ = split(data.records, SplitSpec(config.ratios, seed))
    vocab = Vocabulary.build(r.smiles for r in train_recs)
    train_mols, _, _ = prepare_molecules(train_recs, vocab, config.max_len)

    runners = {}
    for strategy in strategies:
        run_cfg = dataclasses.replace(config, strategy=strategy)
        model = build_model(run_cfg, len(vocab), seed)
        params = model.parameters()
        runners[strategy] = (model, params, AdamState(params, lr=config.lr))

    times = {strategy: [] for strategy in strategies}
    gc_was_enabled = gc.isenabled()
    try:
        for epoch in range(warmup_epochs + measured_epochs):
            for strategy in strategies:
                model, params, state = runners[strategy]
                gc.collect()
                gc.disable()
                started = time.perf_counter()
                for b, batch in enumerate(
                    batch_iter(train_mols, config.batch_size, _mix(seed, epoch))
                ):
                    tape = Tape()
                    loss, _, _ = model.forward_batch(
                        tape, batch, batch_seed=_mix(seed, epoch, b)
                    )
                    grads = backward(loss, tape)
                    adam_step(params, _full_gradients(params, grads), state)
                elapsed = time.perf_counter() - started
                gc.enable()
                if epoch >= warmup_epochs:
                    times[strategy].append(elapsed)
    finally:
        if gc_was_enabled:
            gc.enable()
    timings = {
        strategy: {"median": float(np.median(ts)), "epochs": ts}
        for strategy, ts in times.items()
    }

    verdicts = []
    def check(label, faster, slower):
        if faster in timings and slower in timings:
            ok = timings[faster]["median"] <= timings[slower]["median"]
            verdicts.append({
                "check": label,
                "passed": bool(ok),
                "faster": timings[faster]["median"],
                "slower": timings[slower]["median"],
            })

    check("graph-contrast <= node-contrast", "contrast-graph", "contrast-node")
    check("late-fusion <= lm2mpnn", "late-fusion", "lm2mpnn")
    return {"timings": timings, "verdicts": verdicts}


def attention_core_seconds(seq_len, hidden_dim=64, num_heads=4, repeats=25,
                           seed=0):
    """Median wall time of the O(N^2 d) attention core at one length.

    An untimed same-shape matmul precedes every repeat so a sleeping BLAS
    thread pool never bills its wake-up to the measurement.
    """
    rng = np.random.default_rng(seed)
    dk = hidden_dim // num_heads
    mask = np.ones(seq_len, dtype=bool)
    qs = [constant(rng.normal(size=(seq_len, dk))) for _ in range(num_heads)]
    ks = [constant(rng.normal(size=(seq_len, dk))) for _ in range(num_heads)]
    vs = [constant(rng.normal(size=(seq_len, dk))) for _ in range(num_heads)]
    scale = constant(1.0 / math.sqrt(dk))
    warm_a = np.ones((seq_len, seq_len))
    warm_b = np.ones((seq_len, dk))
    times = []
    for _ in range(repeats + 2):
        tape = Tape(grad_enabled=False)
        warm_a @ warm_b
        started = time.perf_counter()
        for q, k, v in zip(qs, ks, vs):
            scores = tape.apply("matmul", q, tape.apply("transpose", k))
            scores = tape.apply("multiply", scores, scale)
            probs = tape.apply("masked-softmax", scores, mask=mask)
            tape.apply("matmul", probs, v)
        times.append(time.perf_counter() - started)
    return float(np.median(times[2:]))  # first two are warmup


def attention_scaling(base_len=128, hidden_dim=64, num_heads=4, repeats=25):
    """Time the attention core at N and 2N; ratio tracks the N^2 cost.

    The default lengths keep both score matrices inside the cache so the
    ratio reflects the quadratic flop count rather than a cache cliff.
    """
    t1 = attention_core_seconds(base_len, hidden_dim, num_heads, repeats)
    t2 = attention_core_seconds(2 * base_len, hidden_dim, num_heads, repeats)
    return {
        "base_len": base_len,
        "seconds": {base_len: t1, 2 * base_len: t2},
        "ratio": t2 / t1,
    }
