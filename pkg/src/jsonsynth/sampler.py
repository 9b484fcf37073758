"""Constrained generation of JSON records from a trained checkpoint.

At every step the next-token mask is the intersection of the grammar mask (PDA
state), the schema row of the next token's key path, and a count mask for
constraints that depend on what has been emitted so far (duplicate keys,
required keys, array lengths, unique elements). Records that dead-end, run past
the token budget or fail final validation are discarded and redrawn.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import GenerationDeadlock, JsonSynthError, StructureError
from .grammar import JsonGrammar, PDAState, init_state, mask_kind
from .model import Batch, KVCache, MoGOutput
from .schema import DerivedSchema, PathConstraints, SchemaMaskTable, postprocess_record, validate
from .tokenizer import (
    ARR_END,
    ARR_START,
    END,
    NUM,
    OBJ_END,
    OBJ_START,
    PAD,
    START,
    KeyPath,
    TokenStream,
    VocabSpec,
    decode,
    format_path,
)

log = logging.getLogger(__name__)


@dataclass
class _Frame:
    container: str  # "O" for objects (and the record itself), "A" for arrays
    path: KeyPath
    constraints: PathConstraints | None
    required: set = field(default_factory=set)  # key ids still outstanding
    emitted: set = field(default_factory=set)  # key ids already used
    pending: str | None = None  # key whose value is due
    count: int = 0
    seen: set = field(default_factory=set)  # primitive element token ids


class CountTracker:
    """Per-record bookkeeping for count-dependent constraints.

    Mirrors the PDA stack but also remembers concrete key paths, so it doubles
    as the source of the next token's path.
    """

    def __init__(self, schema: DerivedSchema, vocab: VocabSpec):
        self.schema = schema
        self.vocab = vocab
        self.frames: list[_Frame] = [self._object_frame(())]
        self.finished = False

    def _object_frame(self, path: KeyPath) -> _Frame:
        c = self.schema.get(path)
        required = {self.vocab.key_ids[k] for k in c.required} if c is not None else set()
        return _Frame("O", path, c, required=required)

    @property
    def top(self) -> _Frame:
        return self.frames[-1]

    @property
    def depth(self) -> int:
        return len(self.frames) - 1

    def next_path(self) -> KeyPath:
        """Key path carried by the token about to be sampled."""
        f = self.top
        if f.container == "O":
            return f.path if f.pending is None else f.path + (f.pending,)
        return f.path + (f.count,)

    def restrict(self, mask: np.ndarray) -> np.ndarray:
        """Clear the entries the current counts forbid (in place)."""
        f = self.top
        if f.container == "O":
            if f.pending is None:
                for tid in f.emitted:
                    mask[tid] = False
                if f.required:
                    mask[OBJ_END] = False
                    mask[END] = False
            return mask
        c = f.constraints
        if c is None:
            return mask
        if c.min_items is not None and f.count < c.min_items:
            mask[ARR_END] = False
        if c.max_items is not None and f.count >= c.max_items:
            keep = mask[ARR_END]
            mask[:] = False
            mask[ARR_END] = keep
        if c.unique_items:
            for tid in f.seen:
                mask[tid] = False
        return mask

    def advance(self, token: int) -> None:
        f = self.top
        if f.container == "O" and f.pending is None:
            if token == END:
                self.frames.pop()
                self.finished = True
            elif token == OBJ_END:
                self.frames.pop()
                self._value_done(None)
            else:
                f.emitted.add(token)
                f.required.discard(token)
                f.pending = self.vocab.key_name(token)
            return
        if token == ARR_END:
            self.frames.pop()
            self._value_done(None)
            return
        path = self.next_path()
        if token == OBJ_START:
            self.frames.append(self._object_frame(path))
        elif token == ARR_START:
            self.frames.append(_Frame("A", path, self.schema.get(path)))
        else:
            self._value_done(token)

    def _value_done(self, token: int | None) -> None:
        parent = self.top
        if parent.container == "O":
            parent.pending = None
        else:
            parent.count += 1
            if token is not None and self.vocab.is_value(token):
                parent.seen.add(token)


def next_mask(
    pda: PDAState,
    grammar: JsonGrammar,
    table: SchemaMaskTable,
    tracker: CountTracker,
    path: KeyPath | None = None,
) -> np.ndarray:
    """Effective mask ``grammar & schema row & counts``; raises when empty."""
    if path is None:
        path = tracker.next_path()
    mask = grammar.kind_table[mask_kind(pda)] & table.mask(path)
    tracker.restrict(mask)
    if not mask.any():
        raise GenerationDeadlock(f"no admissible token at {format_path(path)} in {pda!r}")
    return mask


def _masked_probs(logits: np.ndarray, mask: np.ndarray, temperature: float) -> np.ndarray:
    z = np.where(mask, logits.astype(np.float64) / temperature, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def _draw(p: np.ndarray, u: float) -> int:
    nz = np.flatnonzero(p > 0)
    c = np.cumsum(p[nz])
    j = int(np.searchsorted(c, u * c[-1], side="right"))
    return int(nz[min(j, len(nz) - 1)])


def sample_token(logits, mask, temperature: float, rng: np.random.Generator) -> int:
    """One categorical draw from the masked, tempered softmax."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise GenerationDeadlock("empty mask")
    return _draw(_masked_probs(logits, mask, temperature), rng.random())


def sample_numeric(
    out: MoGOutput | tuple,
    rng: np.random.Generator,
    lower: float | None = None,
    upper: float | None = None,
) -> float:
    """Component ``j ~ pi``, then ``N(mu_j, sigma_j^2)``, clipped to the bounds.

    ``out`` is a single-position :class:`MoGOutput` or a ``(weights, means,
    log_vars)`` triple of 1-D arrays.
    """
    if isinstance(out, MoGOutput):
        weights = out.weights.detach().double().cpu().numpy().reshape(-1)
        means = out.means.detach().double().cpu().numpy().reshape(-1)
        log_vars = out.log_vars.detach().double().cpu().numpy().reshape(-1)
    else:
        weights, means, log_vars = (np.asarray(a, dtype=np.float64).reshape(-1) for a in out)
    j = _draw(weights, rng.random())
    x = means[j] + np.exp(0.5 * log_vars[j]) * rng.standard_normal()
    if lower is not None:
        x = max(x, lower)
    if upper is not None:
        x = min(x, upper)
    return float(x)


@dataclass
class GenerationSettings:
    n: int
    temperature: float = 1.0
    max_tokens: int | None = None  # None: twice the longest training stream
    seed: int = 0
    batch_size: int = 256
    max_attempts: int = 50  # per record

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class GenerationStats:
    requested: int = 0
    accepted: int = 0
    attempts: int = 0
    deadlocks: int = 0
    overlength: int = 0
    invalid: int = 0
    tokens_sampled: int = 0
    tokens_accepted: int = 0
    max_tokens: int = 0
    deadlock_examples: list = field(default_factory=list)

    @property
    def resampled(self) -> int:
        return self.attempts - self.accepted

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resampled"] = self.resampled
        return d


class _Run:
    """State of one record being generated."""

    __slots__ = ("rng", "pda", "tracker", "tokens", "paths", "values", "failure", "done")

    def __init__(self, rng, schema, vocab):
        self.rng = rng
        self.pda = init_state()
        self.tracker = CountTracker(schema, vocab)
        self.tokens = [START]
        self.paths = [()]
        self.values = [None]
        self.failure: str | None = None
        self.done = False


def _path_tensor(paths: list, vocab: VocabSpec) -> tuple[torch.Tensor, torch.Tensor]:
    D = max(1, max(len(p) for p in paths))
    ids = torch.full((len(paths), 1, D), -1, dtype=torch.long)
    is_index = torch.zeros((len(paths), 1, D), dtype=torch.bool)
    for b, path in enumerate(paths):
        for j, e in enumerate(path):
            if isinstance(e, int):
                ids[b, 0, j] = e
                is_index[b, 0, j] = True
            else:
                ids[b, 0, j] = vocab.key_ids[e]
    return ids, is_index


def default_max_tokens(checkpoint) -> int:
    longest = checkpoint.manifest.get("extra", {}).get("max_stream_length")
    cap = checkpoint.model.cfg.max_seq_len
    return min(2 * int(longest), cap) if longest else cap


@torch.no_grad()
def _generate_batch(checkpoint, jobs: list[tuple[int, int]], settings: GenerationSettings, max_tokens: int, stats):
    model = checkpoint.model
    art = checkpoint.artifacts
    vocab, grammar, table = art.vocab, art.grammar, art.table
    scaled = art.scaled_schema
    gtab, smat = grammar.kind_table, table.matrix
    runs = [_Run(np.random.default_rng([settings.seed, idx, attempt]), scaled, vocab) for idx, attempt in jobs]
    for r in runs:
        r.pda = grammar.advance(r.pda, START)
    B = len(runs)
    cache = KVCache()
    feed_tok = [START] * B
    feed_path = [()] * B
    feed_val = [0.0] * B
    for step in range(max_tokens):
        ids, is_index = _path_tensor(feed_path, vocab)
        batch = Batch(
            tokens=torch.tensor(feed_tok, dtype=torch.long).unsqueeze(1),
            path_ids=ids,
            path_is_index=is_index,
            values=torch.tensor(feed_val, dtype=torch.float32).unsqueeze(1),
            positions=torch.full((B, 1), step, dtype=torch.long),
        )
        h = model(batch, cache)[:, -1]
        logits = model.discrete_logits(h).double().numpy()
        active = [b for b, r in enumerate(runs) if not r.done]
        kinds = np.array([mask_kind(runs[b].pda) for b in active], dtype=np.int64)
        paths = [runs[b].tracker.next_path() for b in active]
        masks = gtab[kinds] & smat[[table.row(p) for p in paths]]
        num_rows = []
        for i, b in enumerate(active):
            runs[b].tracker.restrict(masks[i])
        probs = _masked_probs(logits[active], masks, settings.temperature) if active else None
        for i, b in enumerate(active):
            r = runs[b]
            if not masks[i].any():
                r.failure, r.done = "deadlock", True
                if len(stats.deadlock_examples) < 5:
                    stats.deadlock_examples.append(f"{format_path(paths[i])} {r.pda!r}")
                feed_tok[b], feed_path[b], feed_val[b] = PAD, (), 0.0
                continue
            tok = _draw(probs[i], r.rng.random())
            stats.tokens_sampled += 1
            r.pda = grammar.advance(r.pda, tok)
            r.tracker.advance(tok)
            if tok == NUM:
                num_rows.append((b, i))
            r.tokens.append(tok)
            r.paths.append(paths[i])
            r.values.append(None)
            if tok == END:
                r.done = True
            feed_tok[b], feed_path[b], feed_val[b] = tok, paths[i], 0.0
        if num_rows:
            mog = model.mog_params(h[[b for b, _ in num_rows]])
            w = mog.weights.double().numpy()
            mu = mog.means.double().numpy()
            lv = mog.log_vars.double().numpy()
            for j, (b, i) in enumerate(num_rows):
                r = runs[b]
                c = scaled.get(paths[i])
                lo = c.minimum if c is not None else None
                hi = c.maximum if c is not None else None
                x = sample_numeric((w[j], mu[j], lv[j]), r.rng, lo, hi)
                r.values[-1] = x
                feed_val[b] = x
        for b in range(B):
            if runs[b].done:
                feed_tok[b], feed_path[b], feed_val[b] = PAD, (), 0.0
        if all(r.done for r in runs):
            break
    out = []
    for r in runs:
        if r.failure is None and not r.done:
            r.failure = "overlength"
        if r.failure is not None:
            out.append((None, r.failure, len(r.tokens)))
            continue
        try:
            record = decode(TokenStream(r.tokens, r.paths, r.values), vocab, art.scalers)
        except StructureError:
            out.append((None, "invalid", len(r.tokens)))
            continue
        record = postprocess_record(record, art.schema)
        if validate(record, art.schema):
            out.append((None, "invalid", len(r.tokens)))
        else:
            out.append((record, None, len(r.tokens)))
    return out


_FAILURE_COUNTERS = {"deadlock": "deadlocks", "overlength": "overlength", "invalid": "invalid"}


def generate(checkpoint, settings: GenerationSettings) -> tuple[list, GenerationStats]:
    """``settings.n`` schema-valid records plus resampling statistics.

    Record ``i`` on attempt ``a`` draws from ``default_rng([seed, i, a])``, so
    outputs do not depend on which other records share its batch position.
    """
    max_tokens = settings.max_tokens or default_max_tokens(checkpoint)
    stats = GenerationStats(requested=settings.n, max_tokens=max_tokens)
    records: list = [None] * settings.n
    attempts = [0] * settings.n
    todo = list(range(settings.n))
    was_training = checkpoint.model.training
    checkpoint.model.eval()
    try:
        while todo:
            failed = []
            for start in range(0, len(todo), settings.batch_size):
                chunk = todo[start : start + settings.batch_size]
                jobs = [(i, attempts[i]) for i in chunk]
                for i, (record, failure, n_tok) in zip(chunk, _generate_batch(checkpoint, jobs, settings, max_tokens, stats)):
                    stats.attempts += 1
                    attempts[i] += 1
                    if failure is None:
                        records[i] = record
                        stats.accepted += 1
                        stats.tokens_accepted += n_tok
                        continue
                    counter = _FAILURE_COUNTERS[failure]
                    setattr(stats, counter, getattr(stats, counter) + 1)
                    if attempts[i] >= settings.max_attempts:
                        raise JsonSynthError(
                            f"record {i} failed {attempts[i]} attempts (last: {failure}); stats={stats.to_dict()}"
                        )
                    failed.append(i)
            if failed:
                log.info("resampling %d records", len(failed))
            todo = failed
    finally:
        checkpoint.model.train(was_training)
    return records, stats


def dumps_record(record) -> str:
    return json.dumps(record, ensure_ascii=False)


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(dumps_record(r))
            f.write("\n")


def write_stats(stats: GenerationStats, path, extra: dict | None = None) -> None:
    doc = stats.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
