"""Data pipeline, training loop and checkpoint container."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .errors import CheckpointError
from .grammar import JsonGrammar
from .model import Batch, DualHeadTransformer, ModelConfig, total_loss
from .schema import (
    DerivedSchema,
    SchemaMaskTable,
    compile_mask_table,
    derive_schema,
    schema_rows_for_sequence,
    transform_schema_scaled,
)
from .tokenizer import (
    ARR_END,
    ARR_START,
    DEFAULT_MAX_INDEX,
    DEFAULT_TAU,
    END,
    OBJ_END,
    OBJ_START,
    PAD,
    NumericScalers,
    TokenStream,
    VocabSpec,
    build_vocab,
    encode,
    fit_scalers,
    shuffle_keys,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "jsonsynth.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Artifacts:
    """Everything derived from the training corpus before the model sees it."""

    vocab: VocabSpec
    scalers: NumericScalers
    schema: DerivedSchema
    scaled_schema: DerivedSchema
    max_index: int = DEFAULT_MAX_INDEX

    def __post_init__(self):
        self.grammar = JsonGrammar(self.vocab)
        self.table: SchemaMaskTable = compile_mask_table(self.scaled_schema, self.vocab)

    @classmethod
    def derive(cls, corpus, tau: int = DEFAULT_TAU, max_index: int = DEFAULT_MAX_INDEX) -> "Artifacts":
        corpus = list(corpus)
        vocab = build_vocab(corpus, tau)
        scalers = fit_scalers(corpus, vocab, tau)
        schema = derive_schema(corpus, tau)
        return cls(vocab, scalers, schema, transform_schema_scaled(schema, scalers), max_index)

    def summary(self) -> dict:
        return {
            "n_keys": len(self.vocab.keys),
            "n_values": len(self.vocab.values),
            "vocab_size": self.vocab.size,
            "n_scaled": len(self.scalers),
            "n_paths": self.table.n_paths,
        }

    def encode(self, record) -> TokenStream:
        return encode(record, self.vocab, self.scalers, self.max_index)


def stream_arrays(stream: TokenStream, artifacts: Artifacts) -> dict:
    """Numpy views of one stream: tokens, path element ids, masks ids."""
    vocab = artifacts.vocab
    T = len(stream)
    depth = max(len(p) for p in stream.paths)
    path_ids = np.full((T, max(depth, 1)), -1, dtype=np.int64)
    is_index = np.zeros((T, max(depth, 1)), dtype=bool)
    for t, path in enumerate(stream.paths):
        for j, e in enumerate(path):
            if isinstance(e, int):
                path_ids[t, j] = e
                is_index[t, j] = True
            else:
                path_ids[t, j] = vocab.key_ids[e]
    values = np.array([0.0 if x is None else x for x in stream.continuous], dtype=np.float64)
    return {
        "tokens": np.asarray(stream.tokens, dtype=np.int64),
        "path_ids": path_ids,
        "is_index": is_index,
        "values": values,
        "kinds": artifacts.grammar.mask_kinds_for_sequence(stream.tokens),
        "rows": schema_rows_for_sequence(stream, artifacts.table),
    }


def member_tree(tokens) -> list:
    """Nesting of a stream as position indices.

    Integers are fixed positions; a nested list is an object body, i.e. a list
    of members, each itself a node list starting at its key token.
    """
    pos = 0

    def body():
        nonlocal pos
        members = []
        while tokens[pos] not in (OBJ_END, END):
            member = [pos]
            pos += 1
            value(member)
            members.append(member)
        return members

    def value(out):
        nonlocal pos
        t = tokens[pos]
        out.append(pos)
        pos += 1
        if t == OBJ_START:
            out.append(body())
            out.append(pos)
            pos += 1
        elif t == ARR_START:
            while tokens[pos] != ARR_END:
                value(out)
            out.append(pos)
            pos += 1

    root = [0]
    pos = 1
    root.append(body())
    root.append(pos)
    return root


def shuffled_order(tree: list, rng: np.random.Generator) -> list[int]:
    """Positions after permuting every object's members.

    Draws from ``rng`` in the same order as :func:`shuffle_keys`, so gathering
    a stream's arrays with this order equals re-encoding the shuffled record.
    Grammar kinds and schema rows travel with their tokens unchanged: a
    member's successor is always a key or closer carrying the object's path.
    """
    out: list[int] = []

    def emit(node):
        for item in node:
            if isinstance(item, int):
                out.append(item)
            else:
                for j in rng.permutation(len(item)):
                    emit(item[j])

    emit(tree)
    return out


class RecordDataset(Dataset):
    """Records encoded once; key order is reshuffled per (seed, epoch, index)."""

    def __init__(self, records, artifacts: Artifacts, shuffle: bool = True, seed: int = 0):
        self.records = list(records)
        self.artifacts = artifacts
        self.shuffle = shuffle
        self.seed = seed
        self.epoch = 0
        self._arrays = [stream_arrays(artifacts.encode(r), artifacts) for r in self.records]
        self._trees = [member_tree(a["tokens"]) for a in self._arrays] if shuffle else None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        arrays = self._arrays[i]
        if not self.shuffle:
            return arrays
        rng = np.random.default_rng([self.seed, self.epoch, i])
        order = np.asarray(shuffled_order(self._trees[i], rng))
        return {k: v[order] for k, v in arrays.items()}


def collate(items: list[dict], dtype=torch.float32) -> Batch:
    """Left-pad to a common length so every sequence ends at the last column."""
    B = len(items)
    T = max(len(it["tokens"]) for it in items)
    D = max(it["path_ids"].shape[1] for it in items)
    tokens = np.full((B, T), PAD, dtype=np.int64)
    path_ids = np.full((B, T, D), -1, dtype=np.int64)
    is_index = np.zeros((B, T, D), dtype=bool)
    values = np.zeros((B, T), dtype=np.float64)
    positions = np.zeros((B, T), dtype=np.int64)
    kinds = np.zeros((B, T), dtype=np.int64)
    rows = np.zeros((B, T), dtype=np.int64)
    for b, it in enumerate(items):
        n = len(it["tokens"])
        s = T - n
        d = it["path_ids"].shape[1]
        tokens[b, s:] = it["tokens"]
        path_ids[b, s:, :d] = it["path_ids"]
        is_index[b, s:, :d] = it["is_index"]
        values[b, s:] = it["values"]
        positions[b, s:] = np.arange(n)
        kinds[b, s:] = it["kinds"]
        rows[b, s:] = it["rows"]
    return Batch(
        tokens=torch.from_numpy(tokens),
        path_ids=torch.from_numpy(path_ids),
        path_is_index=torch.from_numpy(is_index),
        values=torch.from_numpy(values).to(dtype),
        positions=torch.from_numpy(positions),
        kinds=torch.from_numpy(kinds),
        rows=torch.from_numpy(rows),
    )


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    shuffle_keys: bool = True
    use_masks: bool = True
    workers: int = 0
    log_every: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_loss: float | None
    lr: float
    seconds: float


@dataclass
class TrainResult:
    model: DualHeadTransformer
    history: list = field(default_factory=list)


def _loader(dataset, batch_size, shuffle_order, seed, workers):
    gen = torch.Generator()
    gen.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle_order,
        collate_fn=collate,
        num_workers=workers,
        generator=gen,
    )


def mask_tensors(artifacts: Artifacts) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        torch.from_numpy(artifacts.grammar.kind_table.copy()),
        torch.from_numpy(artifacts.table.matrix.copy()),
    )


@torch.no_grad()
def evaluate_loss(model, records, artifacts: Artifacts, batch_size: int = 256, use_masks: bool = True) -> float:
    """Token-weighted mean of the training objective, no shuffling, no dropout."""
    was_training = model.training
    model.eval()
    gtab, smat = mask_tensors(artifacts) if use_masks else (None, None)
    ds = RecordDataset(records, artifacts, shuffle=False)
    total, count = 0.0, 0
    for batch in _loader(ds, batch_size, False, 0, 0):
        parts = total_loss(model, batch, gtab, smat)
        total += float(parts.total) * parts.n_targets
        count += parts.n_targets
    model.train(was_training)
    return total / max(count, 1)


def train(
    model_cfg: ModelConfig,
    train_records,
    artifacts: Artifacts,
    cfg: TrainConfig,
    valid_records=None,
    on_epoch=None,
) -> TrainResult:
    torch.manual_seed(cfg.seed)
    model = DualHeadTransformer(model_cfg)
    dataset = RecordDataset(train_records, artifacts, shuffle=cfg.shuffle_keys, seed=cfg.seed)
    loader = _loader(dataset, cfg.batch_size, True, cfg.seed, cfg.workers)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    total_steps = max(1, cfg.epochs * len(loader))
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    )
    gtab, smat = mask_tensors(artifacts) if cfg.use_masks else (None, None)
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        dataset.epoch = epoch
        model.train()
        run_total, run_count = 0.0, 0
        for batch in loader:
            parts = total_loss(model, batch, gtab, smat)
            if not torch.isfinite(parts.total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step}: ce={parts.ce.item():.4g} nll={parts.nll.item():.4g}"
                )
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            step += 1
            run_total += float(parts.total.detach()) * parts.n_targets
            run_count += parts.n_targets
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f", step, float(parts.total))
        valid = None
        if valid_records:
            valid = evaluate_loss(model, valid_records, artifacts, use_masks=cfg.use_masks)
        entry = EpochLog(epoch + 1, run_total / max(run_count, 1), valid, sched.get_last_lr()[0], time.perf_counter() - t0)
        result.history.append(entry)
        log.info("epoch %d train %.4f valid %s (%.1fs)", entry.epoch, entry.train_loss, valid, entry.seconds)
        if on_epoch is not None:
            on_epoch(entry, model)
    model.eval()
    return result


def write_history_csv(history, path) -> None:
    # wall-clock time is left out so reruns with the same seed are byte-identical
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "valid_loss", "lr"])
        for e in history:
            w.writerow([e.epoch, f"{e.train_loss:.6f}", "" if e.valid_loss is None else f"{e.valid_loss:.6f}", f"{e.lr:.6g}"])


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, indent=2).encode()


def build_manifest(model: DualHeadTransformer, artifacts: Artifacts, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "max_index": artifacts.max_index,
        "extra": extra or {},
    }


def save_checkpoint(path, model: DualHeadTransformer, artifacts: Artifacts, extra: dict | None = None) -> None:
    """Zip container: manifest, raw little-endian f32 tensors, corpus artifacts."""
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = build_manifest(model, artifacts, extra)
    manifest["tensors"] = index
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "manifest.json", _json_bytes(manifest))
        _zip_write(zf, "tensors.bin", b"".join(blobs))
        _zip_write(zf, "vocab.json", _json_bytes(artifacts.vocab.to_dict()))
        _zip_write(zf, "scalers.json", _json_bytes(artifacts.scalers.to_dict()))
        _zip_write(zf, "schema.json", _json_bytes(artifacts.schema.to_json_schema()))
        _zip_write(zf, "schema_scaled.json", _json_bytes(artifacts.scaled_schema.to_json_schema()))


@dataclass
class Checkpoint:
    model: DualHeadTransformer
    artifacts: Artifacts
    manifest: dict

    @property
    def extra(self) -> dict:
        return self.manifest.setdefault("extra", {})

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.artifacts, self.extra)


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path} has no manifest") from None
        if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint {manifest.get('format')} v{manifest.get('version')}, "
                f"expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"
            )
        blob = zf.read("tensors.bin")
        vocab = VocabSpec.from_dict(json.loads(zf.read("vocab.json")))
        scalers = NumericScalers.from_dict(json.loads(zf.read("scalers.json")))
        schema = DerivedSchema.from_json_schema(json.loads(zf.read("schema.json")))
        scaled = DerivedSchema.from_json_schema(json.loads(zf.read("schema_scaled.json")))
    artifacts = Artifacts(vocab, scalers, schema, scaled, manifest["max_index"])
    model = DualHeadTransformer(ModelConfig(**manifest["model_config"]))
    state = {}
    for item in manifest["tensors"]:
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=item["offset"]).reshape(item["shape"])
        state[item["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, artifacts, manifest)
