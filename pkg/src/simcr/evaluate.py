"""Decoding, token-level corpus BLEU, and modality-gap diagnostics.

Beam search runs over an abstract step function (prefix rows in, next-token
log-probabilities out), so the search itself can be exercised against
exhaustive enumeration on hand-built toy models. Greedy decoding of a whole
corpus batches sentences together for speed; beam_size == 1 reduces to the
same token choices.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .batching import FrameBatch, TargetBatch, TextBatch, make_task_batch, pack_frames, pack_text
from .corpus import Triple, Vocab
from .model import ModelConfig, ModelParams, EncoderOutput, decode_logprobs, encode, pooled_representation

EVAL_CHUNK = 48  # sentences encoded per batched decode call


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    length_penalty: float = 1.0
    max_len_factor: float = 2.0
    lang: str = "tgt"

    def __post_init__(self):
        if self.beam_size < 1:
            raise EvalError(f"beam_size {self.beam_size} must be >= 1")
        if self.length_penalty < 0:
            raise EvalError(f"length_penalty {self.length_penalty} must be >= 0")


@dataclass
class Hypothesis:
    tokens: list[int]          # generated tokens, eos included when reached
    log_prob: float
    normalized_score: float


def _norm(log_prob: float, n_tokens: int, lp: float) -> float:
    return log_prob / max(n_tokens, 1) ** lp


def beam_search_steps(step_fn, start: list[int], eos: int, beam_size: int,
                      length_penalty: float, max_len: int) -> list[Hypothesis]:
    """Generic beam search; returns hypotheses ranked by normalized score.

    step_fn maps an int array of prefix rows [n, L] to per-row log-probability
    vectors [n, V]. The search finalizes on eos or at max_len and stops once
    beam_size hypotheses have finalized.
    """
    if beam_size < 1:
        raise EvalError("beam_size must be >= 1")
    alive: list[tuple] = [tuple(start)]
    alive_lp = np.zeros(1)
    done: list[Hypothesis] = []
    gen = 0
    cap_reached = False
    while alive and gen < max_len and len(done) < beam_size:
        gen += 1
        logp = np.asarray(step_fn(np.array(alive, dtype=np.int64)))
        vsz = logp.shape[1]
        flat = (alive_lp[:, None] + logp).reshape(-1)
        order = np.argsort(-flat, kind="stable")[: beam_size]
        next_alive: list[tuple] = []
        next_lp: list[float] = []
        for r in order:
            i, v = divmod(int(r), vsz)
            toks = alive[i] + (v,)
            lp = float(flat[r])
            if v == eos:
                out = list(toks[len(start):])
                done.append(Hypothesis(out, lp, _norm(lp, len(out), length_penalty)))
            else:
                next_alive.append(toks)
                next_lp.append(lp)
        alive = next_alive
        alive_lp = np.array(next_lp)
        cap_reached = gen >= max_len
    if cap_reached:
        # finalize prefixes cut off by the length cap; prefixes abandoned by
        # an early stop (enough finished hypotheses) are dropped instead
        for toks, lp in zip(alive, alive_lp):
            out = list(toks[len(start):])
            done.append(Hypothesis(out, float(lp), _norm(float(lp), len(out), length_penalty)))
    done.sort(key=lambda h: -h.normalized_score)
    return done


def _encode_source(params, cfg, vocab, source) -> EncoderOutput:
    source = np.asarray(source)
    if source.ndim == 1:  # token ids
        batch = pack_text([source.astype(np.int64)], vocab.pad)
    elif source.ndim == 2:  # frames
        batch = pack_frames([source.astype(np.float64)])
    else:
        raise EvalError(f"unsupported source rank {source.ndim}")
    return encode(params, cfg, batch, None)


def _model_step_fn(params: ModelParams, cfg: ModelConfig, enc: EncoderOutput):
    states = enc.states.data
    mask = enc.mask

    def step(prefixes: np.ndarray) -> np.ndarray:
        n, width = prefixes.shape
        rep = EncoderOutput(
            states=T.constant(np.broadcast_to(states, (n,) + states.shape[1:])),
            mask=np.broadcast_to(mask, (n, mask.shape[1])),
        )
        target = TargetBatch(
            dec_in=prefixes,
            dec_out=np.zeros_like(prefixes),
            mask=np.ones_like(prefixes, dtype=bool),
        )
        logp = decode_logprobs(params, cfg, rep, target, None)
        return logp.data[:, -1, :]

    return step


def beam_search_hypotheses(params, cfg, vocab: Vocab, source,
                           dcfg: DecodeConfig) -> list[Hypothesis]:
    enc = _encode_source(params, cfg, vocab, source)
    src_units = int(enc.mask.sum())
    max_len = min(int(dcfg.max_len_factor * src_units) + 2, cfg.max_positions - 1)
    return beam_search_steps(
        _model_step_fn(params, cfg, enc),
        start=[vocab.tag(dcfg.lang)],
        eos=vocab.eos,
        beam_size=dcfg.beam_size,
        length_penalty=dcfg.length_penalty,
        max_len=max_len,
    )


def beam_search(params, cfg, vocab: Vocab, source, dcfg: DecodeConfig) -> Hypothesis:
    """Best hypothesis for one source sentence (tokens or frames)."""
    return beam_search_hypotheses(params, cfg, vocab, source, dcfg)[0]


def _strip_eos(tokens: list[int], eos: int) -> list[int]:
    return tokens[:-1] if tokens and tokens[-1] == eos else list(tokens)


def _greedy_chunk(params, cfg, vocab: Vocab, src_batch, tag: int,
                  max_lens: np.ndarray) -> list[list[int]]:
    """Batched greedy decode; per-sentence length caps, eos-terminated."""
    enc = encode(params, cfg, src_batch, None)
    n = enc.states.shape[0]
    tokens = np.full((n, 1), tag, dtype=np.int64)
    finished = np.zeros(n, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(n)]
    for step in range(int(max_lens.max())):
        target = TargetBatch(
            dec_in=tokens,
            dec_out=np.zeros_like(tokens),
            mask=np.ones_like(tokens, dtype=bool),
        )
        logp = decode_logprobs(params, cfg, enc, target, None)
        nxt = logp.data[:, -1, :].argmax(axis=1)
        for i in range(n):
            if finished[i]:
                continue
            tok = int(nxt[i])
            if tok == vocab.eos:
                finished[i] = True
            else:
                outs[i].append(tok)
                if len(outs[i]) >= max_lens[i]:
                    finished[i] = True
        if finished.all():
            break
        nxt = np.where(finished, vocab.pad, nxt)
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return outs


def decode_corpus(params, cfg, vocab: Vocab, items: list[Triple], task: str,
                  dcfg: DecodeConfig) -> list[list[int]]:
    """Decode every item for a task; outputs carry no tag and no eos."""
    from .model import frontend_out_length

    tag = vocab.tag(dcfg.lang)
    if dcfg.beam_size == 1:
        outs: list[list[int]] = []
        for lo in range(0, len(items), EVAL_CHUNK):
            chunk = items[lo:lo + EVAL_CHUNK]
            if task == "mt":
                batch = pack_text([vocab.src_ids(t.src) for t in chunk], vocab.pad)
                units = np.array([len(t.src) for t in chunk])
            else:
                batch = pack_frames([t.frames for t in chunk])
                units = np.array([frontend_out_length(cfg, t.n_frames) for t in chunk])
            caps = np.minimum((dcfg.max_len_factor * units).astype(int) + 2,
                              cfg.max_positions - 2)
            outs.extend(_greedy_chunk(params, cfg, vocab, batch, tag, caps))
        return outs
    outs = []
    for t in items:
        source = vocab.src_ids(t.src) if task == "mt" else t.frames
        best = beam_search(params, cfg, vocab, source, dcfg)
        outs.append(_strip_eos(best.tokens, vocab.eos))
    return outs


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _ngrams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def corpus_bleu(hyps: list[list[int]], refs: list[list[int]]) -> float:
    """Corpus BLEU-4: clipped n-gram precisions, geometric mean, brevity penalty."""
    if not hyps:
        raise EvalError("corpus_bleu: empty hypothesis list")
    if len(hyps) != len(refs):
        raise EvalError(f"corpus_bleu: {len(hyps)} hypotheses vs {len(refs)} references")
    if any(len(r) == 0 for r in refs):
        raise EvalError("corpus_bleu: empty reference")
    clipped = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            counts = Counter(_ngrams(h, n))
            if not counts:
                continue
            ref_counts = Counter(_ngrams(r, n))
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    if hyp_len == 0 or any(c == 0 or t == 0 for c, t in zip(clipped, totals)):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / 4.0
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p)


def simsearch_accuracy(speech_reps: np.ndarray, text_reps: np.ndarray) -> float:
    """Averaged bidirectional nearest-neighbor retrieval accuracy by cosine."""
    a = np.asarray(speech_reps, dtype=np.float64)
    b = np.asarray(text_reps, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] < 2:
        raise EvalError(f"simsearch: need two equal [n>=2, d] sets, got {a.shape} / {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise EvalError("simsearch: zero-norm representation")
    cos = (a / na[:, None]) @ (b / nb[:, None]).T
    idx = np.arange(a.shape[0])
    s2t = (cos.argmax(axis=1) == idx).mean()     # argmax takes the lowest index on ties
    t2s = (cos.argmax(axis=0) == idx).mean()
    return float((s2t + t2s) / 2.0)


def pooled_pairs(params, cfg, vocab: Vocab, items: list[Triple]):
    """Max-pooled encoder outputs for the speech and transcription of each item."""
    speech, text = [], []
    for lo in range(0, len(items), EVAL_CHUNK):
        chunk = items[lo:lo + EVAL_CHUNK]
        fb = pack_frames([t.frames for t in chunk])
        tb = pack_text([vocab.src_ids(t.src) for t in chunk], vocab.pad)
        speech.append(pooled_representation(encode(params, cfg, fb, None)).data)
        text.append(pooled_representation(encode(params, cfg, tb, None)).data)
    return np.concatenate(speech), np.concatenate(text)


def pca_2d(x: np.ndarray):
    """Top-2 principal directions of centered data; deterministic signs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise EvalError(f"pca_2d: need [n>=2, d>=2], got {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    w = vecs[:, order]
    for j in range(w.shape[1]):
        if w[np.abs(w[:, j]).argmax(), j] < 0:
            w[:, j] = -w[:, j]
    return xc @ w, vals[order], float(vals.sum())


def export_representations(params, cfg, vocab: Vocab, items: list[Triple],
                           path: str | Path) -> dict:
    """Write paired pooled vectors plus their 2-D PCA projection (TSV)."""
    speech, text = pooled_pairs(params, cfg, vocab, items)
    stacked = np.concatenate([speech, text])
    coords, top2, total_var = pca_2d(stacked)
    n = len(items)
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# kind\tindex\tpc1\tpc2\tvector...\n")
        for kind, reps, offset in (("speech", speech, 0), ("text", text, n)):
            for i in range(n):
                vec = "\t".join(repr(v) for v in reps[i].tolist())
                c = coords[offset + i]
                fh.write(f"{kind}\t{i}\t{c[0]:.10g}\t{c[1]:.10g}\t{vec}\n")
    return {
        "path": str(path),
        "rows": 2 * n,
        "explained_top2": float(top2.sum() / total_var) if total_var > 0 else 1.0,
    }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    split: str
    n_sentences: int
    bleu: dict[str, float]
    simsearch_accuracy: float | None = None
    vocab_membership: dict[str, dict[str, float]] = field(default_factory=dict)
    samples: dict[str, list[dict]] = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    checkpoint: dict = field(default_factory=dict)

    def __post_init__(self):
        for task, score in self.bleu.items():
            if not 0.0 <= score <= 100.0:
                raise EvalError(f"BLEU for {task} out of range: {score}")
        if self.simsearch_accuracy is not None and not 0.0 <= self.simsearch_accuracy <= 1.0:
            raise EvalError(f"similarity-search accuracy out of range: {self.simsearch_accuracy}")


def membership_rates(hyps: list[list[int]], vocab: Vocab) -> dict[str, float]:
    total = sum(len(h) for h in hyps)
    if total == 0:
        return {"src": 0.0, "tgt": 0.0, "other": 0.0}
    src = sum(1 for h in hyps for t in h if vocab.is_src_surface(t))
    tgt = sum(1 for h in hyps for t in h if vocab.is_tgt_surface(t))
    return {
        "src": src / total,
        "tgt": tgt / total,
        "other": (total - src - tgt) / total,
    }


def _reference(task: str, item: Triple, vocab: Vocab) -> np.ndarray:
    return vocab.src_ids(item.src) if task == "asr" else vocab.tgt_ids(item.tgt)


def task_decode_config(task: str, dcfg: DecodeConfig) -> DecodeConfig:
    lang = "src" if task == "asr" else "tgt"
    if lang == dcfg.lang:
        return dcfg
    return DecodeConfig(beam_size=dcfg.beam_size, length_penalty=dcfg.length_penalty,
                        max_len_factor=dcfg.max_len_factor, lang=lang)


def evaluate_model(params, cfg, vocab: Vocab, items: list[Triple], tasks: list[str],
                   dcfg: DecodeConfig, split: str = "test", diagnostics: bool = False,
                   checkpoint_meta: dict | None = None, n_samples: int = 5,
                   representations_path: str | Path | None = None) -> EvalReport:
    """Decode each requested task, score BLEU, and optionally measure the
    modality gap on the same items."""
    if not items:
        raise EvalError("evaluate_model: empty item list")
    bleu: dict[str, float] = {}
    membership: dict[str, dict[str, float]] = {}
    samples: dict[str, list[dict]] = {}
    for task in tasks:
        tcfg = task_decode_config(task, dcfg)
        if task in ("asr", "st") and any(t.frames is None for t in items):
            raise EvalError(f"task {task!r} needs frames but the corpus has none")
        hyps = decode_corpus(params, cfg, vocab, items, task, tcfg)
        refs = [list(map(int, _reference(task, t, vocab))) for t in items]
        bleu[task] = corpus_bleu(hyps, refs)
        membership[task] = membership_rates(hyps, vocab)
        samples[task] = [
            {
                "source": " ".join(vocab.describe(int(v)) for v in vocab.src_ids(items[i].src)),
                "reference": " ".join(vocab.describe(v) for v in refs[i]),
                "hypothesis": " ".join(vocab.describe(v) for v in hyps[i]),
            }
            for i in range(min(n_samples, len(items)))
        ]
    acc = None
    if diagnostics:
        if any(t.frames is None for t in items):
            raise EvalError("diagnostics need speech frames")
        speech, text = pooled_pairs(params, cfg, vocab, items)
        acc = simsearch_accuracy(speech, text)
        if representations_path is not None:
            export_representations(params, cfg, vocab, items, representations_path)
    return EvalReport(
        split=split,
        n_sentences=len(items),
        bleu=bleu,
        simsearch_accuracy=acc,
        vocab_membership=membership,
        samples=samples,
        decode=asdict(dcfg),
        checkpoint=checkpoint_meta or {},
    )


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, str]:
    """Emit report.json, report.csv, and report.txt; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": str(out_dir / "report.json"),
        "csv": str(out_dir / "report.csv"),
        "txt": str(out_dir / "report.txt"),
    }
    (out_dir / "report.json").write_text(json.dumps(asdict(report), indent=2, sort_keys=True))
    with (out_dir / "report.csv").open("w") as fh:
        fh.write("task,bleu,simsearch_accuracy,src_vocab_rate,tgt_vocab_rate\n")
        for task, score in sorted(report.bleu.items()):
            m = report.vocab_membership.get(task, {})
            acc = "" if report.simsearch_accuracy is None else f"{report.simsearch_accuracy:.4f}"
            fh.write(f"{task},{score:.2f},{acc},{m.get('src', 0):.4f},{m.get('tgt', 0):.4f}\n")
    lines = [f"split: {report.split}   sentences: {report.n_sentences}"]
    if report.checkpoint:
        lines.append(f"checkpoint: {report.checkpoint}")
    for task, score in sorted(report.bleu.items()):
        m = report.vocab_membership.get(task, {})
        lines.append(
            f"{task.upper():4s} BLEU {score:6.2f}   output vocab: "
            f"{m.get('src', 0):.1%} source / {m.get('tgt', 0):.1%} target"
        )
    if report.simsearch_accuracy is not None:
        lines.append(f"similarity-search accuracy: {report.simsearch_accuracy:.3f}")
    for task, rows in sorted(report.samples.items()):
        lines.append(f"--- {task} samples ---")
        for r in rows:
            lines.append(f"  src: {r['source']}")
            lines.append(f"  ref: {r['reference']}")
            lines.append(f"  hyp: {r['hypothesis']}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    return paths
