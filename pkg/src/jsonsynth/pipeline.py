"""End-to-end routines shared by the command line and the acceptance suite."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import nested_bernoulli, nested_bernoulli_probs, path_marginals
from .eval import privacy_dcr
from .model import ModelConfig
from .sampler import GenerationSettings, generate
from .tokenizer import DEFAULT_MAX_INDEX, DEFAULT_TAU
from .training import Artifacts, Checkpoint, TrainConfig, build_manifest, train

log = logging.getLogger(__name__)


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list
    best: Checkpoint | None = None  # lowest validation loss, when tracked


def fit(
    train_records,
    model_overrides: dict | None = None,
    train_cfg: TrainConfig | None = None,
    valid_records=None,
    tau: int = DEFAULT_TAU,
    max_index: int = DEFAULT_MAX_INDEX,
    keep_best: bool = False,
    extra: dict | None = None,
    schema_records=None,
) -> FitResult:
    """Derive artifacts, train a model and wrap it as an in-memory checkpoint.

    ``schema_records`` join the training records when deriving the vocabulary,
    schema and scalers only, so that a held-out split with unseen categories
    can still be encoded for a validation loss.
    """
    train_records = list(train_records)
    train_cfg = train_cfg or TrainConfig()
    artifacts = Artifacts.derive(train_records + list(schema_records or ()), tau=tau, max_index=max_index)
    longest = max(len(artifacts.encode(r)) for r in train_records)
    overrides = dict(model_overrides or {})
    overrides.setdefault("max_index", max_index)
    overrides.setdefault("max_seq_len", max(4096, 2 * longest))
    model_cfg = ModelConfig(vocab_size=artifacts.vocab.size, **overrides)

    best = {"loss": float("inf"), "state": None}

    def on_epoch(entry, model):
        if keep_best and entry.valid_loss is not None and entry.valid_loss < best["loss"]:
            best["loss"] = entry.valid_loss
            best["state"] = copy.deepcopy(model.state_dict())

    result = train(model_cfg, train_records, artifacts, train_cfg, valid_records, on_epoch)
    info = {"max_stream_length": longest, "train_config": train_cfg.to_dict(), "tau": tau}
    info.update(extra or {})
    ckpt = Checkpoint(result.model, artifacts, build_manifest(result.model, artifacts, info))
    best_ckpt = None
    if keep_best and best["state"] is not None:
        model = copy.deepcopy(result.model)
        model.load_state_dict(best["state"])
        best_ckpt = Checkpoint(model, artifacts, build_manifest(model, artifacts, {**info, "best_valid_loss": best["loss"]}))
    return FitResult(ckpt, result.history, best_ckpt)


def split_halves(records: list, seed: int) -> tuple[list, list]:
    """Random 50/50 split into equally sized halves (one record dropped if odd)."""
    idx = np.random.default_rng(seed).permutation(len(records))
    h = len(records) // 2
    return [records[i] for i in idx[:h]], [records[i] for i in idx[h : 2 * h]]


MIN_PRIVACY_RECORDS = 200


@dataclass
class PrivacyRun:
    result: dict
    history: list = field(default_factory=list)


def privacy_protocol(
    records: list,
    model_overrides: dict | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    tau: int = DEFAULT_TAU,
    copy_train: bool = False,
    generation_batch: int = 256,
) -> PrivacyRun:
    """Split 50/50, fit on half A, sample ``|A|`` records, DCR against A and B.

    ``copy_train`` skips training and uses half A itself as the synthetic set.
    """
    if len(records) < MIN_PRIVACY_RECORDS:
        raise ValueError(f"privacy protocol needs at least {MIN_PRIVACY_RECORDS} records, got {len(records)}")
    half_a, half_b = split_halves(records, seed)
    history: list = []
    if copy_train:
        synth = [copy.deepcopy(r) for r in half_a]
    else:
        cfg = train_cfg or TrainConfig(seed=seed)
        fitted = fit(half_a, model_overrides, cfg, tau=tau)
        history = fitted.history
        synth, _ = generate(fitted.checkpoint, GenerationSettings(n=len(half_a), seed=seed, batch_size=generation_batch))
    p = privacy_dcr(synth, half_a, half_b)
    return PrivacyRun(
        {
            "dcr": p.dcr,
            "score": p.score,
            "exact_matches": p.exact_matches,
            "exact_matches_test": p.exact_matches_test,
            "n": p.n,
            "copy_train": copy_train,
        },
        history,
    )


ABLATION_MODEL = {"d_model": 32, "n_layers": 2, "n_heads": 4, "d_ff": 128, "attn_dropout": 0.0}


@dataclass
class AblationRun:
    position_encoding: str
    seed: int
    mae: float
    marginals: dict
    history: list


def kvpe_ablation_run(
    position_encoding: str,
    seed: int,
    n_records: int = 5000,
    epochs: int = 50,
    n_samples: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 128,
) -> AblationRun:
    """Train a small model on the nested Bernoulli corpus; MAE of sampled marginals."""
    records = nested_bernoulli(n_records, seed=seed)
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    fitted = fit(records, {**ABLATION_MODEL, "position_encoding": position_encoding}, cfg)
    samples, _ = generate(fitted.checkpoint, GenerationSettings(n=n_samples, seed=seed, batch_size=500))
    truth = nested_bernoulli_probs()
    est = path_marginals(samples, list(truth))
    mae = float(np.mean([abs(est[p] - q) for p, q in truth.items()]))
    return AblationRun(position_encoding, seed, mae, est, fitted.history)
