import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from jsonsynth.model import (
    Batch,
    DualHeadTransformer,
    ModelConfig,
    MoGOutput,
    apply_mask,
    mog_nll,
    total_loss,
)
from jsonsynth.tokenizer import NUM, PAD, shuffle_keys
from jsonsynth.training import Artifacts, collate, mask_tensors, stream_arrays

CORPUS = [
    {"id": 1.5, "tags": ["x", "y"], "meta": {"ok": True, "score": 0.25}},
    {"id": -2.0, "tags": ["y"], "meta": {"ok": False, "score": 1.75}},
    {"id": 3.25, "tags": [], "meta": {"ok": True, "score": -0.5}},
    {"id": 0.0, "tags": ["x"], "meta": {"ok": None, "score": 2.0}},
]


@pytest.fixture(scope="module")
def art():
    return Artifacts.derive(CORPUS, tau=2, max_index=8)


def make_model(art, dtype=torch.float64, seed=0, **kw):
    cfg = dict(d_model=8, n_layers=2, n_heads=2, d_ff=16, n_components=2, max_index=8, max_seq_len=64, dropout=0.0)
    cfg.update(kw)
    torch.manual_seed(seed)
    model = DualHeadTransformer(ModelConfig(vocab_size=art.vocab.size, **cfg)).to(dtype)
    model.eval()
    return model


def batch_of(art, records, dtype=torch.float64) -> Batch:
    return collate([stream_arrays(art.encode(r), art) for r in records], dtype=dtype)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_components=0)


def worst_gradient_error(art, records=CORPUS, eps=1e-6) -> float:
    """Largest per-tensor relative error between autograd and central differences."""
    model = make_model(art)
    # spread the parameters so the check is not dominated by tiny init values
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    batch = batch_of(art, records)
    gtab, smat = mask_tensors(art)
    assert (batch.tokens == NUM).any()

    def loss():
        return total_loss(model, batch, gtab, smat).total

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        if denom > 1e-8:
            worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


def test_gradients_match_finite_differences(art):
    """Every parameter entry of a 2-layer d=8 K=2 model, float64 central differences."""
    assert worst_gradient_error(art) < 1e-4


def test_nll_gaussian_at_mean():
    x = torch.tensor([0.7], dtype=torch.float64)
    out = MoGOutput(torch.zeros(1, 1, dtype=torch.float64), x.view(1, 1), torch.zeros(1, 1, dtype=torch.float64))
    assert abs(mog_nll(out, x).item() - 0.5 * math.log(2 * math.pi)) < 1e-9
    assert abs(0.5 * math.log(2 * math.pi) - 0.918939) < 1e-6


def test_nll_mixture_collapse():
    x = torch.tensor([0.3], dtype=torch.float64)
    one = MoGOutput(torch.zeros(1, 1, dtype=torch.float64), torch.tensor([[1.0]]).double(), torch.tensor([[0.4]]).double())
    two = MoGOutput(
        torch.log(torch.tensor([[0.5, 0.5]], dtype=torch.float64)),
        torch.tensor([[1.0, 1.0]]).double(),
        torch.tensor([[0.4, 0.4]]).double(),
    )
    assert torch.allclose(mog_nll(one, x), mog_nll(two, x), atol=1e-12)


def test_nll_gradient_finite_differences():
    torch.manual_seed(3)
    params = [torch.randn(3, dtype=torch.float64, requires_grad=True) for _ in range(3)]
    target = torch.tensor(0.4, dtype=torch.float64)

    def f(logits, mu, logvar):
        return mog_nll(MoGOutput(F.log_softmax(logits, -1), mu, logvar), target)

    f(*params).backward()
    for k, p in enumerate(params):
        for i in range(3):
            args = [q.detach().clone() for q in params]
            args[k][i] += 1e-6
            up = f(*args).item()
            args[k][i] -= 2e-6
            down = f(*args).item()
            fd = (up - down) / 2e-6
            assert abs(fd - p.grad[i].item()) <= 1e-4 * max(abs(fd), 1e-6)


def test_nll_stable_far_from_components():
    out = MoGOutput(torch.zeros(1, 1), torch.zeros(1, 1), torch.full((1, 1), -13.8))
    assert torch.isfinite(mog_nll(out, torch.tensor([50.0])))


class TestKvpe:
    def test_empty_path_zero(self, art):
        m = make_model(art)
        ids = torch.full((1, 1, 3), -1)
        is_idx = torch.zeros((1, 1, 3), dtype=torch.bool)
        assert torch.count_nonzero(m.kvpe(ids, is_idx)) == 0

    def test_sum_of_key_embeddings(self, art):
        m = make_model(art)
        v = art.vocab
        ids = torch.tensor([[[v.key_ids["meta"], v.key_ids["score"], -1]]])
        is_idx = torch.zeros_like(ids, dtype=torch.bool)
        expect = m.tok_emb.weight[v.key_ids["meta"]] + m.tok_emb.weight[v.key_ids["score"]]
        assert torch.allclose(m.kvpe(ids, is_idx)[0, 0], expect)

    def test_index_uses_own_table(self, art):
        m = make_model(art)
        v = art.vocab
        ids = torch.tensor([[[v.key_ids["tags"], 1]]])
        is_idx = torch.tensor([[[False, True]]])
        expect = m.tok_emb.weight[v.key_ids["tags"]] + m.idx_emb.weight[1]
        assert torch.allclose(m.kvpe(ids, is_idx)[0, 0], expect)

    def test_multiset_only(self, art):
        m = make_model(art)
        v = art.vocab
        a, b = v.key_ids["meta"], v.key_ids["ok"]
        no = torch.zeros((1, 1, 2), dtype=torch.bool)
        assert torch.allclose(m.kvpe(torch.tensor([[[a, b]]]), no), m.kvpe(torch.tensor([[[b, a]]]), no))

    def test_index_capacity(self, art):
        m = make_model(art)
        with pytest.raises(ValueError):
            m.kvpe(torch.tensor([[[9]]]), torch.tensor([[[True]]]))

    def test_sibling_invariance(self, art):
        """A (token, path) pair embeds identically whatever the sibling order."""
        m = make_model(art)
        rec = CORPUS[0]
        rng = np.random.default_rng(0)
        orders = [rec] + [shuffle_keys(rec, rng) for _ in range(5)]
        seen = {}
        for r in orders:
            s = art.encode(r)
            emb = m.embed(batch_of(art, [r]))[0]
            for t, key in enumerate(zip(s.tokens, s.paths, s.continuous)):
                if key in seen:
                    assert torch.equal(seen[key], emb[t])
                seen[key] = emb[t]


class TestEmbed:
    def _num_batch(self, art, value):
        b = batch_of(art, [CORPUS[0]])
        t = int((b.tokens[0] == NUM).nonzero()[0])
        b.values[0, t] = value
        return b, t

    def test_num_zero_is_position_only(self, art):
        m = make_model(art)
        b, t = self._num_batch(art, 0.0)
        pos = m.kvpe(b.path_ids, b.path_is_index)
        assert torch.equal(m.embed(b)[0, t], pos[0, t])

    def test_num_scales_linearly(self, art):
        m = make_model(art)
        b1, t = self._num_batch(art, 1.0)
        b2, _ = self._num_batch(art, 2.0)
        pos = m.kvpe(b1.path_ids, b1.path_is_index)[0, t]
        n1 = (m.embed(b1)[0, t] - pos).norm()
        n2 = (m.embed(b2)[0, t] - pos).norm()
        assert torch.isclose(n2, 2 * n1)


class TestForward:
    def test_causality(self, art):
        m = make_model(art)
        b = batch_of(art, [CORPUS[0]])
        base = m(b)
        T = b.tokens.shape[1]
        for t in range(1, T):
            pert = Batch(**{**b.__dict__, "tokens": b.tokens.clone()})
            pert.tokens[0, t] = (pert.tokens[0, t] + 1) % art.vocab.size or 1
            out = m(pert)
            assert torch.equal(out[0, :t], base[0, :t])

    def test_causal_jacobian(self, art):
        m = make_model(art)
        b = batch_of(art, [CORPUS[1]])
        h0 = m.embed(b).detach().requires_grad_(True)
        bias = torch.zeros(m.attention_mask(b.tokens).shape, dtype=h0.dtype).masked_fill(
            ~m.attention_mask(b.tokens), float("-inf")
        )
        h = h0
        for i, blk in enumerate(m.blocks):
            h = blk(h, bias, None, i)
        out = m.ln_f(h)
        T = out.shape[1]
        for t in range(T - 1):
            (g,) = torch.autograd.grad(out[0, t].sum(), h0, retain_graph=True)
            assert torch.count_nonzero(g[0, t + 1 :]) == 0

    def test_left_padding(self, art):
        m = make_model(art)
        short, long = CORPUS[2], CORPUS[0]
        alone = m(batch_of(art, [short]))
        padded = m(batch_of(art, [short, long]))
        assert (batch_of(art, [short, long]).tokens[0] == PAD).any()
        assert torch.allclose(padded[0, -1], alone[0, -1], atol=1e-12)
        n = alone.shape[1]
        assert torch.allclose(padded[0, -n:], alone[0], atol=1e-12)

    def test_zero_projections_identity(self, art):
        m = make_model(art, n_layers=1)
        with torch.no_grad():
            blk = m.blocks[0]
            for lin in (blk.attn.proj, blk.ffn[2]):
                lin.weight.zero_()
                lin.bias.zero_()
        b = batch_of(art, [CORPUS[0]])
        assert torch.allclose(m(b), m.ln_f(m.embed(b)), atol=1e-12)

    def test_sequence_overflow(self, art):
        m = make_model(art, max_seq_len=8)
        with pytest.raises(ValueError):
            m(batch_of(art, [CORPUS[0]]))

    def test_sequential_positions(self, art):
        m = make_model(art, position_encoding="sequential")
        a = m(batch_of(art, [CORPUS[2]]))
        b = m(batch_of(art, [CORPUS[2], CORPUS[0]]))
        assert torch.allclose(a[0, -1], b[0, -1], atol=1e-12)


class TestHeads:
    def test_zero_hidden_gives_bias(self, art):
        m = make_model(art)
        with torch.no_grad():
            m.head_discrete.bias.normal_()
            m.head_continuous.bias.normal_()
        h = torch.zeros(1, 8, dtype=torch.float64)
        assert torch.equal(m.discrete_logits(h)[0], m.head_discrete.bias)
        out = m.mog_params(h)
        bc = m.head_continuous.bias
        assert torch.allclose(out.means[0], bc[2:4])
        assert torch.allclose(out.log_weights[0], F.log_softmax(bc[:2], -1))

    def test_single_component_weight_one(self, art):
        m = make_model(art, n_components=1)
        out = m.mog_params(torch.randn(5, 8, dtype=torch.float64))
        assert torch.allclose(out.weights, torch.ones(5, 1, dtype=torch.float64))

    def test_weights_on_simplex(self, art):
        m = make_model(art, n_components=4)
        out = m.mog_params(torch.randn(100, 8, dtype=torch.float64) * 10)
        assert torch.allclose(out.weights.sum(-1), torch.ones(100, dtype=torch.float64), atol=1e-6)
        assert (out.weights >= 0).all()

    def test_logvar_floor(self, art):
        m = make_model(art)
        with torch.no_grad():
            m.head_continuous.bias.fill_(-100.0)
        out = m.mog_params(torch.zeros(1, 8, dtype=torch.float64))
        assert (out.log_vars >= -13.8).all()


class TestMask:
    def test_all_ones_identity(self):
        x = torch.randn(3, 6)
        assert torch.equal(apply_mask(x, torch.ones(3, 6, dtype=torch.bool)), x)

    def test_one_bit(self):
        m = torch.zeros(6, dtype=torch.bool)
        m[4] = True
        p = torch.softmax(apply_mask(torch.randn(6), m), -1)
        assert p[4] == 1.0 and p.sum() == 1.0
        assert (p[~m] == 0).all()

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            apply_mask(torch.randn(4), torch.zeros(4, dtype=torch.bool))

    def test_uniform_ce(self):
        V = 11
        ce = F.cross_entropy(torch.zeros(1, V), torch.tensor([3]))
        assert math.isclose(ce.item(), math.log(V), rel_tol=1e-6)

    def test_masked_ce_not_above_unmasked(self, art):
        m = make_model(art)
        with torch.no_grad():
            for p in m.parameters():
                p.add_(0.5 * torch.randn_like(p))
        b = batch_of(art, CORPUS)
        gtab, smat = mask_tensors(art)
        masked = total_loss(m, b, gtab, smat)
        plain = total_loss(m, b, None, None)
        assert masked.ce.item() <= plain.ce.item()


class TestTotalLoss:
    def test_no_num_targets(self):
        corpus = [{"a": "x", "b": [True]}, {"a": "y", "b": []}]
        art = Artifacts.derive(corpus, max_index=8)
        m = make_model(art)
        parts = total_loss(m, batch_of(art, corpus), *mask_tensors(art))
        assert parts.n_num == 0 and parts.lam == 0.0
        assert torch.equal(parts.total, parts.ce)

    def test_lambda_fraction(self, art):
        m = make_model(art)
        b = batch_of(art, CORPUS)
        parts = total_loss(m, b, *mask_tensors(art))
        targets = b.tokens[:, 1:]
        n = int((targets != PAD).sum())
        k = int((targets == NUM).sum())
        assert parts.lam == k / n < 1

    def test_hand_oracle_single_record(self):
        """Seven-token stream with one NUM target; loss assembled by hand."""
        corpus = [{"u": {"v": 0.5}}, {"u": {"v": 2.5}}, {"u": {"v": 4.0}}]
        art = Artifacts.derive(corpus, tau=2, max_index=8)
        m = make_model(art, seed=5)
        rec = corpus[1]
        s = art.encode(rec)
        assert len(s) == 7 and s.tokens[4] == NUM
        b = batch_of(art, [rec])
        h = m(b)[0]
        gm = art.grammar.masks_for_sequence(s)
        sm = art.table.matrix[[art.table.row(s.paths[t + 1]) for t in range(6)]]
        ce_terms = []
        for t in range(6):
            logits = m.discrete_logits(h[t]).detach().numpy()
            ok = gm[t] & sm[t]
            z = logits[ok]
            lse = z.max() + math.log(np.exp(z - z.max()).sum())
            ce_terms.append(lse - logits[s.tokens[t + 1]])
        ce = sum(ce_terms) / 6
        mog = m.mog_params(h[3])
        w = mog.weights.detach().numpy()
        mu = mog.means.detach().numpy()
        var = np.exp(mog.log_vars.detach().numpy())
        x = s.continuous[4]
        dens = sum(w[j] * math.exp(-((x - mu[j]) ** 2) / (2 * var[j])) / math.sqrt(2 * math.pi * var[j]) for j in range(2))
        expected = ce + (1 / 6) * -math.log(dens)
        got = total_loss(m, b, *mask_tensors(art)).total.item()
        assert abs(got - expected) < 1e-6
