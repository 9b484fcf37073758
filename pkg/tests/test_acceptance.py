"""The eleven acceptance criteria, each at its stated tolerance.

Every test records one ``CRITERION n: PASS|FAIL ...`` line, collected and
printed at the end of the session, and then asserts. Trained checkpoints are
cached in pytest's cache directory (``pytest --cache-clear`` retrains); the
runtime checks use the wall-clock time measured when the model was trained.
"""

import hashlib
import json
import math
import time
from dataclasses import asdict

import numpy as np
import pytest
import torch

from jsonsynth.datasets import load_adult, movies, nested_bernoulli, read_jsonl, write_jsonl
from jsonsynth.eval import (
    array_length_wasserstein,
    detection_score,
    evaluate,
    fidelity,
    length_histogram,
    privacy_dcr,
    privacy_score,
    wasserstein_1d,
)
from jsonsynth.grammar import JsonGrammar
from jsonsynth.model import MoGOutput, mog_nll
from jsonsynth.pipeline import fit, kvpe_ablation_run, split_halves
from jsonsynth.sampler import GenerationSettings, dumps_record, generate
from jsonsynth.schema import schema_masks_for_sequence, validate
from jsonsynth.tokenizer import DEFAULT_TAU, decode, walk, wildcard
from jsonsynth.training import Artifacts, TrainConfig, load_checkpoint

from conftest import ACCEPTANCE_LINES
from test_grammar import random_walk, to_json_text
from test_model import worst_gradient_error
from test_tokenizer import _assert_same


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def adult_split():
    """Disjoint slices of the Adult training split, fixed by seed 0."""
    adult = load_adult("train")
    idx = np.random.default_rng(0).permutation(len(adult))
    take = lambda a, b: [adult[i] for i in idx[a:b]]  # noqa: E731
    return {
        "train10k": take(0, 10_000),
        "holdout": take(10_000, 20_000),
        "shuffle5k": take(20_000, 25_000),
        "valid": take(25_000, 27_000),
        "subsample5k": take(0, 5_000),
    }


@pytest.fixture(scope="module")
def cache(request):
    return request.config.cache.mkdir("jsonsynth-acceptance")


def cached_fit(cache, name, records, overrides, cfg, valid=None, tau=DEFAULT_TAU):
    """Fit once per configuration; later sessions reload the checkpoint."""
    spec = [name, len(records), overrides, cfg.to_dict(), tau, valid is not None]
    key = hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:12]
    zpath, mpath = cache / f"{name}-{key}.zip", cache / f"{name}-{key}.json"
    if zpath.exists() and mpath.exists():
        return load_checkpoint(zpath), json.loads(mpath.read_text())
    t0 = time.perf_counter()
    # the validation split only widens the vocabulary so its loss is defined
    res = fit(records, overrides, cfg, valid_records=valid, tau=tau, schema_records=valid)
    meta = {"seconds": time.perf_counter() - t0, "history": [asdict(e) for e in res.history]}
    res.checkpoint.save(zpath)
    mpath.write_text(json.dumps(meta))
    return res.checkpoint, meta


def test_c1_grammar_soundness():
    corpus = movies() + load_adult("train")[:2000]
    grammar = JsonGrammar(Artifacts.derive(corpus).vocab)
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(10_000):
        tokens = random_walk(grammar, rng)
        try:
            if not isinstance(json.loads(to_json_text(tokens, grammar.vocab)), dict):
                failures += 1
        except json.JSONDecodeError:
            failures += 1
    seconds = time.perf_counter() - t0
    ok = failures == 0 and seconds < 60
    record(1, ok, f"10000 walks, {failures} parse failures, {seconds:.1f}s (limit 60s)")
    assert ok


def test_c2_corpus_mask_consistency(adult_split):
    violations, positions = 0, 0
    for corpus in (movies(), adult_split["subsample5k"]):
        art = Artifacts.derive(corpus)
        for r in corpus:
            s = art.encode(r)
            eff = art.grammar.masks_for_sequence(s) & schema_masks_for_sequence(s, art.table)
            ok = eff[np.arange(len(s) - 1), s.tokens[1:]]
            violations += int((~ok).sum())
            positions += len(ok)
    record(2, violations == 0, f"{violations} violations over {positions} positions (movies + 5k Adult)")
    assert violations == 0


def test_c3_round_trip():
    fixtures = {"movies": movies(), "nested_bernoulli": nested_bernoulli(5000, seed=0), "adult": load_adult()}
    failed, total = 0, 0
    for name, corpus in fixtures.items():
        art = Artifacts.derive(corpus)
        for r in corpus:
            total += 1
            try:
                _assert_same(decode(art.encode(r), art.vocab, art.scalers), r)
            except AssertionError:
                failed += 1
    record(3, failed == 0, f"{total - failed}/{total} records round-trip (movies, nested Bernoulli, full Adult)")
    assert failed == 0


def test_c4_gradient_check():
    from test_model import CORPUS

    torch.manual_seed(0)
    t0 = time.perf_counter()
    worst = worst_gradient_error(Artifacts.derive(CORPUS, tau=2, max_index=8))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-4 and seconds < 60
    record(4, ok, f"worst relative error {worst:.2e} (limit 1e-4), {seconds:.1f}s (limit 60s)")
    assert ok


def test_c5_mog_analytic():
    x = torch.tensor([[1.234]], dtype=torch.float64)
    out = MoGOutput(torch.zeros(1, 1, dtype=torch.float64), x.clone(), torch.zeros(1, 1, dtype=torch.float64))
    nll = mog_nll(out, x.view(-1)).item()
    err = abs(nll - 0.5 * math.log(2 * math.pi))
    record(5, err < 1e-9, f"NLL {nll:.12f}, error {err:.1e} (limit 1e-9)")
    assert err < 1e-9


@pytest.mark.slow
def test_c6_kvpe_ablation(cache):
    results, seconds = {}, 0.0
    for pe in ("kvpe", "sequential"):
        for seed in (0, 1, 2):
            path = cache / f"ablation-{pe}-{seed}.json"
            if path.exists():
                run = json.loads(path.read_text())
            else:
                t0 = time.perf_counter()
                r = kvpe_ablation_run(pe, seed)
                run = {"mae": r.mae, "seconds": time.perf_counter() - t0}
                path.write_text(json.dumps(run))
            results.setdefault(pe, []).append(run["mae"])
            seconds += run["seconds"]
    kv, sq = np.array(results["kvpe"]), np.array(results["sequential"])
    kv_ok, sq_ok, time_ok = bool((kv < 0.10).all()), bool((sq > 0.20).all()), seconds < 900
    ok = kv_ok and sq_ok and time_ok
    record(
        6,
        ok,
        f"MAE kvpe {kv.mean():.4f}±{kv.std():.4f} (<0.10: {kv_ok}), sequential {sq.mean():.4f}±{sq.std():.4f} "
        f"(>0.20: {sq_ok}), {seconds:.0f}s (limit 900s: {time_ok})",
    )
    assert ok


C9_MODEL: dict = {}  # default architecture: d=64, 8 layers, 4 heads, d_ff 512, K=5
C9_TRAIN = TrainConfig(epochs=70, batch_size=128, lr=5e-4, seed=0)
# integer keys with a dominant point mass (capital-gain is 92% zeros) stay
# categorical; through the continuous head the spike smears over the grid
C9_TAU = 128


@pytest.fixture(scope="module")
def adult_model(cache, adult_split):
    return cached_fit(cache, "adult10k", adult_split["train10k"], C9_MODEL, C9_TRAIN, tau=C9_TAU)


@pytest.fixture(scope="module")
def adult_samples(cache, adult_model):
    ckpt, meta = adult_model
    path = cache / "adult10k-samples.jsonl"
    key = cache / "adult10k-samples.key"
    tag = json.dumps([ckpt.extra.get("train_config"), ckpt.extra.get("tau")], sort_keys=True)
    if path.exists() and key.exists() and key.read_text() == tag:
        return read_jsonl(path), json.loads((cache / "adult10k-samples.stats.json").read_text())
    t0 = time.perf_counter()
    records, stats = generate(ckpt, GenerationSettings(n=10_000, seed=0))
    info = {**stats.to_dict(), "seconds": time.perf_counter() - t0}
    write_jsonl(records, path)
    (cache / "adult10k-samples.stats.json").write_text(json.dumps(info))
    key.write_text(tag)
    return records, info


@pytest.mark.slow
def test_c7_generation_validity(adult_model, adult_samples):
    ckpt, _ = adult_model
    records, _ = adult_samples
    schema = ckpt.artifacts.schema
    parse_failures = sum(json.loads(dumps_record(r)) != r for r in records)
    violations = sum(bool(validate(r, schema)) for r in records)
    int_paths = {p for p, c in schema.paths.items() if c.kinds == {"integer"}}
    off_grid = 0
    for r in records:
        for path, v in walk(r):
            if wildcard(path) in int_paths and not (isinstance(v, int) and not isinstance(v, bool)):
                off_grid += 1
    ok = len(records) == 10_000 and parse_failures == 0 and violations == 0 and off_grid == 0
    record(7, ok, f"{len(records)} records, {parse_failures} parse failures, {violations} schema violations, "
           f"{off_grid} off-grid integers over {len(int_paths)} integer paths")
    assert ok


@pytest.mark.slow
def test_c8_metric_oracles(adult_split):
    real = adult_split["holdout"][:2000]
    test = adult_split["holdout"][2000:4000]
    rep = evaluate(real, real, test=test, target="income", seed=0)
    shapes, trends = rep.fidelity["shapes"], rep.fidelity["trends"]
    det, util = rep.detection["score"], rep.utility["score"]
    train = adult_split["holdout"][4000:5000]
    priv = privacy_dcr([dict(r) for r in train], train, adult_split["holdout"][5000:6000])
    auc_half, dcr_spot = detection_score([0.5]), privacy_score(58.471)
    checks = {
        "shapes": abs(shapes - 1) <= 1e-9,
        "trends": abs(trends - 1) <= 1e-9,
        "detection": det >= 0.95,
        "utility": util == 1.0,
        "copy DCR": priv.dcr == 100.0 and priv.score == 0.0,
        "AUC 0.5": auc_half == 1.0,
        "DCR 58.471": abs(dcr_spot - 0.831) <= 1e-3,
    }
    ok = all(checks.values())
    record(8, ok, f"shapes {shapes:.12f} trends {trends:.12f} detection {det:.3f} utility {util:.3f} "
           f"copy DCR {priv.dcr:.1f}%/{priv.score:.1f} spot {auc_half:.3f},{dcr_spot:.4f}; "
           f"failed: {[k for k, v in checks.items() if not v]}")
    assert ok


@pytest.mark.slow
def test_c9_end_to_end(adult_model, adult_samples, adult_split):
    _, meta = adult_model
    synth, gen = adult_samples
    summary, _ = fidelity(adult_split["holdout"], synth)
    rep = evaluate(adult_split["holdout"], synth, metrics=("detection",), seed=0)
    fid, det = summary["overall"], rep.detection["score"]
    minutes = (meta["seconds"] + gen["seconds"]) / 60
    ok = fid >= 0.90 and det >= 0.60 and minutes < 60
    record(9, ok, f"fidelity {fid:.3f} (>=0.90; shapes {summary['shapes']:.3f}, trends {summary['trends']:.3f}), "
           f"detection {det:.3f} (>=0.60), train+generate {minutes:.1f} min (<60), "
           f"{len(meta['history'])} epochs, final train loss {meta['history'][-1]['train_loss']:.4f}")
    assert ok


# dropout off so key shuffling is the only regularizer being compared
C10_MODEL = {"dropout": 0.0}
C10_TRAIN = dict(epochs=60, batch_size=128, lr=5e-4, seed=0)


@pytest.mark.slow
def test_c10_shuffle_ablation(cache, adult_split):
    half_a, half_b = split_halves(adult_split["shuffle5k"], seed=0)
    valid = adult_split["valid"]
    out = {}
    for shuffled in (True, False):
        cfg = TrainConfig(shuffle_keys=shuffled, **C10_TRAIN)
        ckpt, meta = cached_fit(cache, f"shuffle-{shuffled}", half_a, C10_MODEL, cfg, valid=valid)
        last = meta["history"][-1]
        samples, _ = generate(ckpt, GenerationSettings(n=len(half_a), seed=0))
        out[shuffled] = {"gap": last["valid_loss"] - last["train_loss"], "dcr": privacy_dcr(samples, half_a, half_b).dcr}
    gap_ok = out[False]["gap"] > out[True]["gap"]
    dcr_ok = out[False]["dcr"] > out[True]["dcr"]
    record(10, gap_ok and dcr_ok, f"gap unshuffled {out[False]['gap']:.4f} vs shuffled {out[True]['gap']:.4f} "
           f"({gap_ok}); DCR unshuffled {out[False]['dcr']:.1f}% vs shuffled {out[True]['dcr']:.1f}% ({dcr_ok})")
    assert gap_ok and dcr_ok


def test_c11_array_wasserstein():
    a = wasserstein_1d([1, 2, 3], [2, 3, 4])
    b = wasserstein_1d([4, 1, 1, 2], [1, 2, 4, 1])
    m = movies()
    shifted = [dict(r, genres=r["genres"] + ["Drama"]) for r in m]
    same = array_length_wasserstein(m, m, "genres")
    plus_one = array_length_wasserstein(m, shifted, "genres")
    rep = evaluate(m, shifted, metrics=("fidelity",), array_paths=["genres"])
    ok = (
        a == 1.0
        and b == 0.0
        and same == 0.0
        and plus_one == 1.0
        and rep.arrays["genres"]["wasserstein"] == 1.0
        and length_histogram(m, "genres") == {2: 1, 3: 1}
    )
    record(11, ok, f"{{1,2,3}} vs {{2,3,4}} = {a}, equal multisets = {b}, movies vs itself = {same}, "
           f"movies vs one extra genre = {plus_one}")
    assert ok
