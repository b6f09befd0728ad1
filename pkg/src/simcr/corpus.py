"""Synthetic speech-transcription-translation corpus.

Sentences are uniform random token sequences over a source vocabulary. The
translation applies a seeded token bijection and then swaps adjacent pairs,
so the task is invertible (a rule-based reference translator scores BLEU
100) but non-monotonic. Speech is rendered by repeating a per-token
prototype vector a random number of times and adding Gaussian jitter.

Everything derives deterministically from the task spec and its seed; the
on-disk format is line-oriented, tab-separated UTF-8 that round-trips
frames bit-exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class CorpusError(ValueError):
    """Invalid task spec or generation request."""


class CorpusFormatError(ValueError):
    """Malformed corpus file; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Vocab:
    """Joint vocabulary: reserved tokens, then disjoint source/target surfaces."""

    src_size: int
    tgt_size: int
    pad: int = 0
    bos: int = 1
    eos: int = 2
    tag_src: int = 3
    tag_tgt: int = 4

    @property
    def base_src(self) -> int:
        return 5

    @property
    def base_tgt(self) -> int:
        return 5 + self.src_size

    @property
    def size(self) -> int:
        return 5 + self.src_size + self.tgt_size

    def src_ids(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(idx, dtype=np.int64) + self.base_src

    def tgt_ids(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(idx, dtype=np.int64) + self.base_tgt

    def tag(self, lang: str) -> int:
        if lang == "src":
            return self.tag_src
        if lang == "tgt":
            return self.tag_tgt
        raise CorpusError(f"unknown language tag {lang!r}; registered: src, tgt")

    def is_src_surface(self, tok: int) -> bool:
        return self.base_src <= tok < self.base_tgt

    def is_tgt_surface(self, tok: int) -> bool:
        return self.base_tgt <= tok < self.size

    def describe(self, tok: int) -> str:
        names = {self.pad: "<pad>", self.bos: "<bos>", self.eos: "<eos>",
                 self.tag_src: "<src>", self.tag_tgt: "<tgt>"}
        if tok in names:
            return names[tok]
        if self.is_src_surface(tok):
            return f"s{tok - self.base_src:03d}"
        if self.is_tgt_surface(tok):
            return f"t{tok - self.base_tgt:03d}"
        return f"<unk:{tok}>"


@dataclass(frozen=True)
class TaskSpec:
    """Generator parameters for the synthetic triple task."""

    src_vocab_size: int = 64
    tgt_vocab_size: int = 64
    len_min: int = 4
    len_max: int = 12
    frame_dim: int = 16
    repeat_min: int = 2
    repeat_max: int = 4
    jitter_std: float = 0.3
    seed: int = 7

    def __post_init__(self):
        if self.src_vocab_size != self.tgt_vocab_size:
            raise CorpusError("token bijection needs equal source/target vocab sizes")
        if self.src_vocab_size < 2:
            raise CorpusError("vocab size must be >= 2")
        if not (1 <= self.len_min <= self.len_max):
            raise CorpusError(f"bad length range [{self.len_min}, {self.len_max}]")
        if not (1 <= self.repeat_min <= self.repeat_max):
            raise CorpusError(f"bad repeat range [{self.repeat_min}, {self.repeat_max}]")
        if self.jitter_std < 0 or self.frame_dim < 1:
            raise CorpusError("jitter_std must be >= 0 and frame_dim >= 1")

    def vocab(self) -> Vocab:
        return Vocab(self.src_vocab_size, self.tgt_vocab_size)

    def bijection(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
        return rng.permutation(self.src_vocab_size)

    def prototypes(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        return rng.normal(size=(self.src_vocab_size, self.frame_dim))

    def to_dict(self) -> dict:
        return asdict(self)


def swap_adjacent(tokens: np.ndarray) -> np.ndarray:
    """Swap positions (0,1), (2,3), ...; an unpaired tail stays put."""
    out = np.array(tokens)
    n = (len(out) // 2) * 2
    out[0:n:2], out[1:n:2] = tokens[1:n:2], tokens[0:n:2]
    return out


def translate(spec: TaskSpec, src: np.ndarray) -> np.ndarray:
    return swap_adjacent(spec.bijection()[np.asarray(src)])


def invert_translation(spec: TaskSpec, tgt: np.ndarray) -> np.ndarray:
    inv = np.argsort(spec.bijection())
    return inv[swap_adjacent(np.asarray(tgt))]


@dataclass
class Triple:
    """One corpus item: speech frames (optional), transcription, translation.

    src/tgt hold per-language surface indexes (0-based); the joint Vocab
    maps them to model token ids.
    """

    src: np.ndarray
    tgt: np.ndarray
    frames: np.ndarray | None

    @property
    def n_frames(self) -> int:
        return 0 if self.frames is None else self.frames.shape[0]

    def key(self) -> tuple:
        return tuple(int(t) for t in self.src)


@dataclass
class CorpusSplit:
    train: list[Triple] = field(default_factory=list)
    valid: list[Triple] = field(default_factory=list)
    test: list[Triple] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Triple]:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)

    def counts(self) -> dict:
        return {name: len(self.split(name)) for name in SPLITS}


def render_speech(tokens: np.ndarray, spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Emit repeat_min..repeat_max jittered copies of each token prototype."""
    protos = spec.prototypes()
    reps = rng.integers(spec.repeat_min, spec.repeat_max + 1, size=len(tokens))
    base = np.repeat(protos[np.asarray(tokens)], reps, axis=0)
    if spec.jitter_std > 0:
        base = base + rng.normal(0.0, spec.jitter_std, size=base.shape)
    return base


def _capacity(spec: TaskSpec) -> int:
    v = spec.src_vocab_size
    return sum(v ** length for length in range(spec.len_min, spec.len_max + 1))


def generate_corpus(
    spec: TaskSpec,
    sizes: dict[str, int],
    with_frames: bool = True,
    sentence_seed: int | None = None,
    exclude: set[tuple] | None = None,
) -> CorpusSplit:
    """Sample disjoint train/valid/test triples, reproducible from (spec, sizes).

    sentence_seed varies WHICH sentences are drawn without touching the task
    rule (bijection, prototypes), so a second corpus over the same synthetic
    language pair can act as external parallel data; exclude drops sentence
    identities already used elsewhere.
    """
    sizes = {name: int(sizes.get(name, 0)) for name in SPLITS}
    if all(n == 0 for n in sizes.values()):
        raise CorpusError("requested an empty corpus")
    total = sum(sizes.values())
    n_excluded = len(exclude) if exclude else 0
    if total + n_excluded > _capacity(spec):
        raise CorpusError(
            f"vocab too small: {total} distinct sentences requested, "
            f"only {_capacity(spec) - n_excluded} available"
        )
    if sentence_seed is None:
        sentence_seed = spec.seed
    text_rng = np.random.default_rng(np.random.SeedSequence([int(sentence_seed), 2]))
    seen: set[tuple] = set(exclude) if exclude else set()
    sentences: list[np.ndarray] = []
    attempts = 0
    while len(sentences) < total:
        attempts += 1
        if attempts > 100 * total + 1000:
            raise CorpusError("sentence sampling stalled; vocab too small for request")
        length = int(text_rng.integers(spec.len_min, spec.len_max + 1))
        sent = text_rng.integers(0, spec.src_vocab_size, size=length)
        key = tuple(int(t) for t in sent)
        if key in seen:
            continue
        seen.add(key)
        sentences.append(sent)

    corpus = CorpusSplit(manifest={
        "spec": spec.to_dict(),
        "sizes": sizes,
        "with_frames": with_frames,
        "sentence_seed": int(sentence_seed),
    })
    offset = 0
    for si, name in enumerate(SPLITS):
        items = corpus.split(name)
        for i in range(sizes[name]):
            src = sentences[offset + i]
            tgt = translate(spec, src)
            frames = None
            if with_frames:
                frame_rng = np.random.default_rng(
                    np.random.SeedSequence([int(sentence_seed), 3, si, i])
                )
                frames = render_speech(src, spec, frame_rng)
            items.append(Triple(src=src, tgt=tgt, frames=frames))
        offset += sizes[name]
    return corpus


def filter_pairs(
    corpus: CorpusSplit,
    min_frames: int = 4,
    max_frames: int = 200,
    max_len_ratio: float = 1.5,
) -> CorpusSplit:
    """Drop out-of-range utterances and over-ratio text pairs (strictly exceeding)."""
    if min_frames <= 0 or max_frames <= 0 or max_len_ratio <= 0:
        raise CorpusError("filter thresholds must be positive")

    def keep(t: Triple) -> bool:
        if t.frames is not None and not (min_frames <= t.n_frames <= max_frames):
            return False
        ratio = max(len(t.src), len(t.tgt)) / min(len(t.src), len(t.tgt))
        return ratio <= max_len_ratio

    out = CorpusSplit(manifest=dict(corpus.manifest))
    for name in SPLITS:
        out.split(name).extend(t for t in corpus.split(name) if keep(t))
    out.manifest["filter"] = {
        "min_frames": min_frames,
        "max_frames": max_frames,
        "max_len_ratio": max_len_ratio,
    }
    if all(not out.split(name) for name in SPLITS):
        raise CorpusError("filtering removed every triple")
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _fmt_ints(arr: np.ndarray) -> str:
    return " ".join(str(int(v)) for v in arr)


def save_corpus(corpus: CorpusSplit, path: str | Path) -> None:
    path = Path(path)
    manifest = dict(corpus.manifest)
    manifest["counts"] = corpus.counts()
    with path.open("w", encoding="utf-8") as fh:
        fh.write("manifest\t" + json.dumps(manifest, sort_keys=True) + "\n")
        for name in SPLITS:
            for t in corpus.split(name):
                if t.frames is None:
                    tdim, frames_txt = 0, ""
                else:
                    # repr of a Python float is the shortest digit string that
                    # round-trips bit-exactly (<= 17 significant digits)
                    tdim = t.frames.shape[0]
                    frames_txt = " ".join(repr(v) for v in t.frames.reshape(-1).tolist())
                fdim = 0 if t.frames is None else t.frames.shape[1]
                fh.write(
                    f"triple\t{name}\t{_fmt_ints(t.src)}\t{_fmt_ints(t.tgt)}"
                    f"\t{tdim}\t{fdim}\t{frames_txt}\n"
                )


def load_corpus(path: str | Path, expected_spec: TaskSpec | None = None) -> CorpusSplit:
    path = Path(path)
    corpus = CorpusSplit()
    manifest_seen = False
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            kind = fields[0]
            if kind == "manifest":
                if len(fields) != 2:
                    raise CorpusFormatError(line_no, "manifest record needs one JSON field")
                try:
                    corpus.manifest = json.loads(fields[1])
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(line_no, f"bad manifest JSON: {exc}") from exc
                manifest_seen = True
            elif kind == "triple":
                if len(fields) != 7:
                    raise CorpusFormatError(line_no, f"expected 7 fields, got {len(fields)}")
                _, split_name, src_txt, tgt_txt, t_txt, fdim_txt, frames_txt = fields
                if split_name not in SPLITS:
                    raise CorpusFormatError(line_no, f"unknown split {split_name!r}")
                try:
                    src = np.array(src_txt.split(), dtype=np.int64)
                    tgt = np.array(tgt_txt.split(), dtype=np.int64)
                    t, fdim = int(t_txt), int(fdim_txt)
                    if t == 0:
                        frames = None
                        if frames_txt:
                            raise CorpusFormatError(line_no, "frames present but T=0")
                    else:
                        flat = np.array(frames_txt.split(), dtype=np.float64)
                        if flat.size != t * fdim:
                            raise CorpusFormatError(
                                line_no, f"expected {t * fdim} frame values, got {flat.size}"
                            )
                        frames = flat.reshape(t, fdim)
                except CorpusFormatError:
                    raise
                except ValueError as exc:
                    raise CorpusFormatError(line_no, f"bad numeric field: {exc}") from exc
                corpus.split(split_name).append(Triple(src=src, tgt=tgt, frames=frames))
            else:
                raise CorpusFormatError(line_no, f"unknown record kind {kind!r}")
    if not manifest_seen:
        raise CorpusFormatError(0, "missing manifest record")
    declared = corpus.manifest.get("counts")
    if declared is not None and declared != corpus.counts():
        raise CorpusFormatError(
            0, f"truncated corpus: manifest declares {declared}, file has {corpus.counts()}"
        )
    if expected_spec is not None:
        file_dim = corpus.manifest.get("spec", {}).get("frame_dim")
        if file_dim is not None and file_dim != expected_spec.frame_dim:
            log.warning(
                "corpus frame_dim %s differs from spec frame_dim %s",
                file_dim, expected_spec.frame_dim,
            )
    return corpus


def spec_from_manifest(manifest: dict) -> TaskSpec:
    return TaskSpec(**manifest["spec"])
