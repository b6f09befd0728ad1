"""Multi-stage training: stage configs, the step loop, and checkpointing.

Determinism layout: every stage derives one entropy value from
(pipeline seed, stage name); per-step dropout streams and per-epoch batch
orders derive from (entropy, step) and (entropy, task, epoch). Any step is
therefore reproducible in isolation, which also makes mid-stage resume
exact. Stages are isolated: editing one stage never changes a sibling's
random draws. Optimizer state resets at stage boundaries.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .batching import TaskBatcher
from .corpus import CorpusSplit, Vocab
from .losses import ConsistencyConfig, LossParts, composite_objective, ce_label_smooth
from .model import ModelConfig, ModelParams, decode_logprobs, encode, init_params
from .optim import OptimState, adam_step, lr_inverse_sqrt
from . import tensor as T
from .tensor import NumericalError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SIMCRCK1"
LOG_COLUMNS = ("step", "lr", "ce", "intra", "cross", "total", "val_loss")


class PipelineError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _entropy(*parts) -> int:
    h = hashlib.blake2s(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def config_hash(model_cfg: ModelConfig) -> str:
    blob = json.dumps(model_cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StageConfig:
    name: str
    tasks: tuple[str, ...]
    alpha: float = 0.0
    beta: float = 0.0
    init: str | None = None
    max_steps: int = 2000
    peak_lr: float = 1e-3
    warmup_steps: int = 400
    eval_every: int = 200
    corpus: dict[str, str] = field(default_factory=dict)  # task -> corpus key
    label_smoothing: float = 0.1
    dropout: float | None = None
    max_text_tokens: int = 512
    max_frames: int = 2048
    frozen_reference: bool = False

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        bad = set(self.tasks) - {"mt", "asr", "st"}
        if bad or not self.tasks:
            raise PipelineError(f"stage {self.name!r}: tasks must be a non-empty "
                                f"subset of mt/asr/st, got {self.tasks}")
        if self.beta > 0 and not ({"st", "asr", "mt"} & set(self.tasks)):
            raise PipelineError(f"stage {self.name!r}: beta > 0 needs a cross pair")
        if self.max_steps < 0 or self.peak_lr <= 0 or self.warmup_steps < 1:
            raise PipelineError(f"stage {self.name!r}: bad optimizer settings")
        if self.eval_every < 1:
            raise PipelineError(f"stage {self.name!r}: eval_every must be >= 1")

    def corpus_key(self, task: str) -> str:
        return self.corpus.get(task, "main")


@dataclass
class PipelineConfig:
    name: str
    stages: list[StageConfig]
    seed: int = 1
    model: dict = field(default_factory=dict)  # ModelConfig field overrides

    def __post_init__(self):
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise PipelineError(f"duplicate stage names in pipeline {self.name!r}")
        seen: set[str] = set()
        for s in self.stages:
            if s.init is not None and s.init not in seen:
                raise PipelineError(
                    f"stage {s.name!r} initializes from {s.init!r}, which is not an "
                    "earlier stage"
                )
            seen.add(s.name)

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise PipelineError(f"no stage named {name!r}")


@dataclass
class Checkpoint:
    params: ModelParams
    optim: OptimState
    stage: str
    step: int
    val_history: list[tuple[int, float]]
    model_config: dict
    config_hash: str

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            params=self.params.copy(),
            optim=OptimState(
                {k: v.copy() for k, v in self.optim.first_moment.items()},
                {k: v.copy() for k, v in self.optim.second_moment.items()},
                self.optim.step_count,
            ),
            stage=self.stage,
            step=self.step,
            val_history=list(self.val_history),
            model_config=dict(self.model_config),
            config_hash=self.config_hash,
        )


def select_best(history: list[tuple[int, float]]) -> int:
    """Index of the lowest validation loss; ties resolve to the earliest entry."""
    if not history:
        raise PipelineError("select_best: empty history")
    best = 0
    for i, (_, loss) in enumerate(history):
        if loss < history[best][1]:
            best = i
    return best


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    names = [{"name": k, "shape": list(v.data.shape)} for k, v in ckpt.params.items()]
    header = json.dumps({
        "stage": ckpt.stage,
        "step": ckpt.step,
        "val_history": ckpt.val_history,
        "model_config": ckpt.model_config,
        "config_hash": ckpt.config_hash,
        "optim_step": ckpt.optim.step_count,
        "params": names,
    }, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for _, p in ckpt.params.items():
            fh.write(np.ascontiguousarray(p.data).tobytes())
        for k, _ in ckpt.params.items():
            fh.write(np.ascontiguousarray(ckpt.optim.first_moment[k]).tobytes())
        for k, _ in ckpt.params.items():
            fh.write(np.ascontiguousarray(ckpt.optim.second_moment[k]).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    try:
        hlen = int.from_bytes(blob[off:off + 8], "little")
        off += 8
        header = json.loads(blob[off:off + hlen].decode())
        off += hlen
        names = header["params"]
        tensors: dict[str, T.Tensor] = {}
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for dest, store in ((tensors, None), (m, "m"), (v, "v")):
            for entry in names:
                shape = tuple(entry["shape"])
                nbytes = int(np.prod(shape)) * 8
                if off + nbytes > len(blob):
                    raise CheckpointError(f"{path}: truncated payload")
                arr = np.frombuffer(blob[off:off + nbytes], dtype=np.float64).reshape(shape)
                off += nbytes
                if store is None:
                    dest[entry["name"]] = T.parameter(arr.copy())
                else:
                    dest[entry["name"]] = arr.copy()
        if off != len(blob):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint: {exc}") from exc
    return Checkpoint(
        params=ModelParams(tensors),
        optim=OptimState(m, v, int(header["optim_step"])),
        stage=header["stage"],
        step=int(header["step"]),
        val_history=[(int(s), float(l)) for s, l in header["val_history"]],
        model_config=header["model_config"],
        config_hash=header["config_hash"],
    )


@dataclass
class StageResult:
    checkpoint: Checkpoint
    rows: list[dict]
    aborted: bool
    best_step: int
    best_val: float


def resolve_model_config(data: dict[str, CorpusSplit], overrides: dict) -> tuple[ModelConfig, Vocab]:
    main = data.get("main")
    if main is None:
        raise PipelineError("data must provide a 'main' corpus")
    spec = main.manifest.get("spec")
    if spec is None:
        raise PipelineError("main corpus manifest lacks the task spec")
    vocab = Vocab(spec["src_vocab_size"], spec["tgt_vocab_size"])
    fields = {"vocab_size": vocab.size, "frame_dim": spec["frame_dim"]}
    fields.update(overrides)
    return ModelConfig(**fields), vocab


def _validation_loss(params, cfg, batches_by_task, eps) -> float:
    total = 0.0
    for task, batches in batches_by_task.items():
        loss_sum, tok_sum = 0.0, 0
        for batch in batches:
            src = batch.frames if task in ("asr", "st") else batch.src_text
            enc = encode(params, cfg, src, None)
            logp = decode_logprobs(params, cfg, enc, batch.target, None)
            flat = T.reshape(logp, (-1, cfg.vocab_size))
            loss, n = ce_label_smooth(
                flat, batch.target.dec_out.reshape(-1),
                batch.target.mask.reshape(-1), eps)
            loss_sum += loss.item() * n
            tok_sum += n
        total += loss_sum / max(tok_sum, 1)
    return total


def run_stage(
    stage: StageConfig,
    model_cfg: ModelConfig,
    vocab: Vocab,
    data: dict[str, CorpusSplit],
    pipeline_seed: int,
    init_ckpt: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    allow_hash_mismatch: bool = False,
) -> StageResult:
    """Optimize the stage objective; returns the best-validation checkpoint."""
    if stage.dropout is not None:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "dropout_p": stage.dropout})
    chash = config_hash(model_cfg)
    entropy = _entropy(pipeline_seed, stage.name)

    if init_ckpt is not None:
        if init_ckpt.config_hash != chash and not allow_hash_mismatch:
            raise CheckpointError(
                f"stage {stage.name!r}: init checkpoint hash {init_ckpt.config_hash} "
                f"does not match resolved config {chash} (use the override to force)"
            )
        params = init_ckpt.params.copy()
    else:
        params = init_params(model_cfg, seed=entropy)
    optim = OptimState.for_params(dict(params.items()))
    start_step = 0
    val_history: list[tuple[int, float]] = []
    if resume is not None:
        if resume.stage != stage.name:
            raise CheckpointError(
                f"resume checkpoint is for stage {resume.stage!r}, not {stage.name!r}")
        params = resume.params.copy()
        optim = OptimState(
            {k: v.copy() for k, v in resume.optim.first_moment.items()},
            {k: v.copy() for k, v in resume.optim.second_moment.items()},
            resume.optim.step_count,
        )
        start_step = resume.step
        val_history = list(resume.val_history)

    cc = ConsistencyConfig(
        alpha=stage.alpha, beta=stage.beta,
        label_smoothing=stage.label_smoothing,
        frozen_reference=stage.frozen_reference,
    )

    def budget(task):
        return stage.max_text_tokens if task == "mt" else stage.max_frames

    batchers = {}
    val_batches = {}
    for task in stage.tasks:
        key = stage.corpus_key(task)
        split = data.get(key)
        if split is None:
            raise PipelineError(f"stage {stage.name!r}: no corpus named {key!r}")
        if not split.train:
            raise PipelineError(f"stage {stage.name!r}: corpus {key!r} has no train items")
        batchers[task] = TaskBatcher(
            split.train, task, vocab, budget(task), _entropy(entropy, "shuffle", task))
        valid = split.valid if split.valid else data["main"].valid
        if valid:
            vb = TaskBatcher(valid, task, vocab, budget(task),
                             _entropy(entropy, "val", task))
            val_batches[task] = vb.batches

    def snapshot(step):
        return Checkpoint(
            params=params.copy(),
            optim=OptimState(
                {k: m.copy() for k, m in optim.first_moment.items()},
                {k: m.copy() for k, m in optim.second_moment.items()},
                optim.step_count,
            ),
            stage=stage.name, step=step, val_history=list(val_history),
            model_config=model_cfg.to_dict(), config_hash=chash,
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fresh = resume is None
        log_path = out_dir / f"{stage.name}.log.csv"
        log_fh = log_path.open("w" if fresh else "a", newline="")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)

    rows: list[dict] = []
    best: Checkpoint | None = None
    fallback = snapshot(start_step)  # last-good state if training never evaluates
    aborted = False
    param_dict = dict(params.items())

    def record_val(step):
        nonlocal best
        if not val_batches:
            return None
        val = _validation_loss(params, model_cfg, val_batches, stage.label_smoothing)
        val_history.append((step, val))
        # ties resolve to the earliest step, so only a strict improvement
        # can land on the entry just appended
        if val_history[select_best(val_history)][0] == step:
            best = snapshot(step)
        return val

    try:
        if stage.max_steps == 0:
            best = fallback  # degenerate stage: hand back the init unchanged
        for step in range(start_step + 1, stage.max_steps + 1):
            lr = lr_inverse_sqrt(step, stage.warmup_steps, stage.peak_lr)
            batches = {t: b.batch_for_step(step - 1) for t, b in batchers.items()}
            rng = np.random.default_rng(np.random.SeedSequence([entropy, 5, step]))
            total, parts = composite_objective(params, model_cfg, batches, cc, rng)
            params.clear_grads()
            T.backward(total)
            adam_step(param_dict, optim, lr)
            params.clear_grads()
            val = None
            if step % stage.eval_every == 0 or step == stage.max_steps:
                val = record_val(step)
                if out_dir is not None:
                    save_checkpoint(snapshot(step), out_dir / f"{stage.name}.last.ckpt")
                    if best is not None:
                        save_checkpoint(best, out_dir / f"{stage.name}.best.ckpt")
            row = {
                "step": step, "lr": lr, "ce": parts.ce, "intra": parts.intra,
                "cross": parts.cross, "total": parts.total,
                "val_loss": "" if val is None else val,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])
    except NumericalError as exc:
        log.warning("stage %s aborted at a non-finite loss: %s", stage.name, exc)
        aborted = True
    finally:
        if log_fh is not None:
            log_fh.close()

    if best is None:
        best = fallback if aborted else snapshot(stage.max_steps)
    if out_dir is not None:
        save_checkpoint(best, out_dir / f"{stage.name}.best.ckpt")
    idx = select_best(best.val_history) if best.val_history else 0
    return StageResult(
        checkpoint=best,
        rows=rows,
        aborted=aborted,
        best_step=best.val_history[idx][0] if best.val_history else best.step,
        best_val=best.val_history[idx][1] if best.val_history else float("nan"),
    )


@dataclass
class PipelineResult:
    final: Checkpoint
    stages: dict[str, StageResult]
    model_config: ModelConfig
    aborted: bool


def run_pipeline(
    pcfg: PipelineConfig,
    data: dict[str, CorpusSplit],
    out_dir: str | Path | None = None,
) -> PipelineResult:
    """Execute stages in order, wiring init references to earlier results."""
    model_cfg, vocab = resolve_model_config(data, pcfg.model)
    for s in pcfg.stages:  # validate corpus refs before any training starts
        for task in s.tasks:
            if s.corpus_key(task) not in data:
                raise PipelineError(
                    f"stage {s.name!r} references corpus {s.corpus_key(task)!r} "
                    "which is not in the data directory"
                )
    results: dict[str, StageResult] = {}
    final: Checkpoint | None = None
    aborted = False
    for s in pcfg.stages:
        init_ckpt = results[s.init].checkpoint if s.init is not None else None
        res = run_stage(
            s, model_cfg, vocab, data, pcfg.seed,
            init_ckpt=init_ckpt, out_dir=out_dir,
        )
        results[s.name] = res
        final = res.checkpoint
        if res.aborted:
            aborted = True
            log.warning("pipeline %s: stage %s aborted; stopping", pcfg.name, s.name)
            break
    assert final is not None
    return PipelineResult(final=final, stages=results, model_config=model_cfg, aborted=aborted)


# ---------------------------------------------------------------------------
# built-in pipelines
# ---------------------------------------------------------------------------

PRESET_NAMES = ("baseline-reg", "simregcr-minus", "simregcr", "baseline-zero", "simzerocr")


def build_pipeline(name: str, seed: int = 1, model: dict | None = None) -> PipelineConfig:
    """Named training strategies; regular pipelines are MT pretrain -> ST finetune,
    zero-shot pipelines add an MT finetune stage before ASR&MT finetuning."""
    model = dict(model or {})
    mt_pretrain = dict(
        name="mt_pretrain", tasks=("mt",), corpus={"mt": "ext"},
        max_steps=2000, peak_lr=1e-3,
    )
    mt_finetune = dict(
        name="mt_finetune", tasks=("mt",), init="mt_pretrain",
        max_steps=1000, peak_lr=1e-3,
    )
    st_finetune = dict(
        name="st_finetune", tasks=("st",), init="mt_pretrain",
        max_steps=2000, peak_lr=5e-4,
    )
    asrmt_finetune = dict(
        name="asrmt_finetune", tasks=("asr", "mt"), init="mt_finetune",
        max_steps=3000, peak_lr=5e-4,
    )
    if name == "baseline-reg":
        stages = [StageConfig(**mt_pretrain), StageConfig(**st_finetune)]
    elif name == "simregcr-minus":
        stages = [StageConfig(**mt_pretrain), StageConfig(**st_finetune, alpha=3.0)]
    elif name == "simregcr":
        stages = [StageConfig(**mt_pretrain, alpha=1.0),
                  StageConfig(**st_finetune, alpha=3.0)]
    elif name == "baseline-zero":
        stages = [StageConfig(**mt_pretrain), StageConfig(**mt_finetune),
                  StageConfig(**asrmt_finetune)]
    elif name == "simzerocr":
        stages = [StageConfig(**mt_pretrain), StageConfig(**mt_finetune),
                  StageConfig(**asrmt_finetune, beta=45.0)]
    else:
        raise PipelineError(f"unknown pipeline {name!r}; built-ins: {PRESET_NAMES}")
    return PipelineConfig(name=name, stages=stages, seed=seed, model=model)


def pipeline_to_dict(pcfg: PipelineConfig) -> dict:
    out = {"name": pcfg.name, "seed": pcfg.seed, "model": dict(pcfg.model),
           "stages": []}
    for s in pcfg.stages:
        d = asdict(s)
        d["tasks"] = list(s.tasks)
        out["stages"].append(d)
    return out


def pipeline_from_dict(d: dict) -> PipelineConfig:
    stages = []
    for sd in d.get("stages", []):
        sd = dict(sd)
        sd["tasks"] = tuple(sd.get("tasks", ()))
        stages.append(StageConfig(**sd))
    return PipelineConfig(
        name=d.get("name", "custom"),
        stages=stages,
        seed=int(d.get("seed", 1)),
        model=dict(d.get("model", {})),
    )
