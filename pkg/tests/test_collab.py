import numpy as np
import pytest
import torch

from gradcheck_util import fd_check
from mssr.collab import (
    CollabConfig,
    SRModel,
    build_models,
    collab_loss,
    combine_terms,
    load_model,
    pool_batches,
    pseudo_label,
    ramp,
    read_curves_csv,
    save_models,
    sup_loss,
    total_loss,
    train_collab,
    write_curves_csv,
)
from mssr.data import PatchSampler
from mssr.errors import ConfigError, DivergenceError, InvariantViolation, SizingError
from mssr.generator import build_ensemble
from mssr.utils import derive_seed, param_checksum, torch_generator


def test_ramp_examples():
    assert ramp(0, 1000) == 0
    assert ramp(1000, 1000) == 1
    assert ramp(250, 1000) == 0.25


def test_ramp_past_end_warns():
    with pytest.warns(UserWarning):
        assert ramp(1500, 1000) == 1.0
    with pytest.raises(ConfigError):
        ramp(0, 0)


def test_ramp_monotone():
    P = 37
    vals = [ramp(p, P) for p in range(P + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_sup_loss_examples(rng):
    a = torch.rand(2, 3, 4, 4)
    assert sup_loss(a, a).item() == 0
    assert abs(sup_loss(torch.full((1, 1, 4, 4), 0.2), torch.full((1, 1, 4, 4), 0.5)).item() - 0.3) < 1e-7
    x, y = rng.random((4, 4)), rng.random((4, 4))
    brute = sum(abs(x[i, j] - y[i, j]) for i in range(4) for j in range(4)) / 16
    assert abs(sup_loss(torch.tensor(x), torch.tensor(y)).item() - brute) < 1e-12
    with pytest.raises(SizingError):
        sup_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_collab_loss_k2():
    a = torch.rand(1, 3, 8, 8)
    outputs = [[a, a.clone()], [None, a.clone()]]
    assert collab_loss(outputs, 0).item() == 0
    outputs = [[a, a + 0.1], [None, a]]
    assert abs(collab_loss(outputs, 0).item() - 0.1) < 1e-6


def test_collab_loss_k3_brute_force(rng):
    out = [[torch.tensor(rng.random((1, 1, 3, 3))) for _ in range(3)] for _ in range(3)]
    for i in range(3):
        brute = 0.0
        for j in range(3):
            if j == i:
                continue
            a, b = out[i][j].numpy(), out[j][j].numpy()
            brute += np.abs(a - b).mean()
        assert abs(collab_loss(out, i).item() - brute) < 1e-7


def test_collab_loss_k1_zero():
    assert collab_loss([[torch.rand(1, 1, 2, 2)]], 0).item() == 0


def test_pseudo_label_examples(rng):
    class Const(torch.nn.Module):
        scale = 1

        def __init__(self, v):
            super().__init__()
            self.v = v

        def forward(self, x):
            return torch.full_like(x, self.v)

    x = torch.rand(1, 3, 4, 4)
    assert torch.equal(pseudo_label([Const(0.3), Const(0.3)], x).y_hat, torch.full_like(x, 0.3))
    assert torch.equal(pseudo_label([Const(0.0), Const(1.0)], x).y_hat, torch.full_like(x, 0.5))

    outs = [torch.tensor(rng.random((1, 1, 3, 3))) for _ in range(3)]

    class Fixed(torch.nn.Module):
        scale = 1

        def __init__(self, t):
            super().__init__()
            self.t = t

        def forward(self, x):
            return self.t

    label = pseudo_label([Fixed(t) for t in outs], x)
    brute = np.mean([o.numpy() for o in outs], axis=0)
    assert np.abs(label.y_hat.numpy() - brute).max() < 1e-7
    assert label.teacher_count == 3 and label.gradient_barrier
    with pytest.raises(ValueError):
        pseudo_label([], x)


def test_pseudo_label_has_no_grad():
    models = build_models(2, width=4, n_blocks=1)
    label = pseudo_label(models, torch.rand(1, 3, 4, 4))
    assert not label.y_hat.requires_grad


def test_combine_terms_arithmetic():
    cfg = CollabConfig(lambda_sup=1, lambda_col=0.01, lambda_ada=10, P=1000)
    assert combine_terms(0.2, 0.05, 0.1, 500, cfg) == pytest.approx(0.7005, abs=1e-12)


def _instance(k=2, dtype=torch.float64, size=8):
    torch.manual_seed(0)
    models = [m.to(dtype) for m in build_models(k, seed=1, width=4, n_blocks=1)]
    y = torch.rand(2, 3, size, size, dtype=dtype)
    xs = [torch.rand(2, 3, size // 4, size // 4, dtype=dtype) for _ in range(k)]
    x_real = torch.rand(2, 3, size // 4, size // 4, dtype=dtype)
    return models, y, xs, x_real


def test_total_loss_reduces_to_sup():
    models, y, xs, _ = _instance()
    cfg = CollabConfig(lambda_col=0, lambda_ada=0, P=10)
    loss, parts = total_loss(0, models, xs, y, 5, cfg)
    assert loss.item() == pytest.approx(sup_loss(models[0](xs[0]), y).item(), abs=1e-15)
    assert parts["ada"] == 0


def test_total_loss_p0_no_ada():
    models, y, xs, _ = _instance()
    cfg = CollabConfig(P=10)
    loss, parts = total_loss(0, models, xs, y, 0, cfg)
    assert parts["ada"] == 0 and parts["ramp"] == 0


def test_total_loss_needs_real_batch():
    models, y, xs, _ = _instance()
    with pytest.raises(ConfigError):
        total_loss(0, models, xs, y, 5, CollabConfig(P=10))


def test_total_loss_breakdown_combines():
    models, y, xs, x_real = _instance()
    cfg = CollabConfig(P=10)
    loss, parts = total_loss(1, models, xs, y, 4, cfg, x_real=x_real)
    assert loss.item() == pytest.approx(combine_terms(parts["sup"], parts["col"], parts["ada"], 4, cfg), rel=1e-12)


@pytest.mark.parametrize("p", [0, 3, 10])
def test_total_loss_gradient_fd(p):
    models, y, xs, x_real = _instance()
    cfg = CollabConfig(P=10)
    label = pseudo_label(models, x_real)

    def loss():
        return total_loss(0, models, xs, y, p, cfg, x_real=x_real, label=label)[0]

    assert fd_check(loss, list(models[0].parameters())[:4] + [models[0].head.weight]) < 1e-3


def test_no_teacher_gradients():
    models, y, xs, x_real = _instance()
    cfg = CollabConfig(P=10)
    v0, _ = total_loss(0, models, xs, y, 5, cfg, x_real=x_real)
    v0.backward()
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in models[1].parameters())
    # perturbing the peer changes the collaborative term
    before = collab_loss([[models[0](xs[0]), models[0](xs[1])], [None, models[1](xs[1])]], 0).item()
    with torch.no_grad():
        models[1].head.bias.add_(0.1)
    after = collab_loss([[models[0](xs[0]), models[0](xs[1])], [None, models[1](xs[1])]], 0).item()
    assert before != after


def test_pool_batches_balanced():
    xs = [torch.full((4, 1, 2, 2), float(j)) for j in range(2)]
    pooled = pool_batches(xs, 1)
    assert pooled.shape == (4, 1, 2, 2)
    assert [int(v) for v in pooled[:, 0, 0, 0]] == [1, 0, 1, 0]


def test_config_validation():
    with pytest.raises(ConfigError):
        CollabConfig(alternation=("synthetic", "bogus"))
    with pytest.raises(ConfigError):
        CollabConfig(P=0)
    with pytest.raises(ConfigError):
        CollabConfig(lambda_col=-1)


def test_sr_model_shapes():
    for scale in (2, 4):
        m = SRModel(scale=scale, width=4, n_blocks=1)
        assert m(torch.rand(1, 3, 5, 6)).shape == (1, 3, 5 * scale, 6 * scale)


def _ens(k=2):
    return build_ensemble(["residual_chain:width=4", "attention_strided:width=4"][:k])


def _tcfg(**kw):
    base = dict(steps=6, P=6, batch_size=2, val_every=3, seed=0)
    base.update(kw)
    return CollabConfig(**base)


def test_steps_zero_unchanged(small_corpus):
    models = build_models(2, width=4, n_blocks=1)
    sums = [param_checksum(m) for m in models]
    out, curves = train_collab(models, _ens(), small_corpus, _tcfg(steps=0))
    assert curves == [] and [param_checksum(m) for m in out] == sums


def test_train_reproducible_and_curves(small_corpus, tmp_path):
    runs = []
    for n in range(2):
        models = build_models(2, width=4, n_blocks=1)
        _, curves = train_collab(models, _ens(), small_corpus, _tcfg())
        write_curves_csv(curves, tmp_path / f"c{n}.csv")
        runs.append((tmp_path / f"c{n}.csv").read_bytes())
    assert runs[0] == runs[1]
    rows = read_curves_csv(tmp_path / "c0.csv")
    assert [r["iteration"] for r in rows] == [3, 6]
    assert {"psnr_0", "psnr_1", "psnr_best", "sup_0", "col_1", "ada_0"} <= set(rows[0])


def test_generators_stay_frozen(small_corpus):
    ens = _ens()
    sums = [param_checksum(g) for g in ens]
    train_collab(build_models(2, width=4, n_blocks=1), ens, small_corpus, _tcfg())
    assert [param_checksum(g) for g in ens] == sums


def test_generator_mutation_detected(small_corpus, monkeypatch):
    ens = _ens()
    orig = ens[0].forward

    def mutating(hr, generator=None):
        with torch.no_grad():
            ens[0].head.bias.add_(1e-3)
        return orig(hr, generator)

    monkeypatch.setattr(ens[0], "forward", mutating)
    with pytest.raises(InvariantViolation):
        train_collab(build_models(2, width=4, n_blocks=1), ens, small_corpus, _tcfg())


def test_nan_aborts_with_checkpoint(small_corpus, tmp_path):
    models = build_models(2, width=4, n_blocks=1)
    with torch.no_grad():
        models[0].head.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        train_collab(models, _ens(), small_corpus, _tcfg(), checkpoint_dir=tmp_path)
    assert (tmp_path / "sr_0.pt").exists()


def test_k1_reduces_to_supervised(small_corpus):
    # single generator, extra terms off: identical to a hand-written L1 loop
    cfg = _tcfg(K=1, lambda_col=0, lambda_ada=0, steps=5)
    ens = _ens(1)
    model = build_models(1, width=4, n_blocks=1)[0]
    ref = build_models(1, width=4, n_blocks=1)[0]
    train_collab([model], ens, small_corpus, cfg, val_pairs=[])

    sampler = PatchSampler([small_corpus.image(p) for p in small_corpus.hr_items], small_corpus.patch_size_hr,
                           derive_seed(cfg.seed, 11))
    opt = torch.optim.Adam(ref.parameters(), lr=cfg.lr, betas=cfg.betas)
    ref.train()
    for p in range(cfg.steps):
        y = sampler(cfg.batch_size)
        with torch.no_grad():
            x = ens[0](y, generator=torch_generator(cfg.seed, 13, p, 0))
        opt.zero_grad()
        (ref(x) - y).abs().mean().backward()
        opt.step()
    assert param_checksum(model) == param_checksum(ref)


def test_scale_mismatch(small_corpus):
    models = [SRModel(scale=2, width=4, n_blocks=1) for _ in range(2)]
    with pytest.raises(ConfigError):
        train_collab(models, _ens(), small_corpus, _tcfg())


def test_checkpoint_roundtrip(tmp_path):
    models = build_models(2, width=4, n_blocks=1)
    paths = save_models(models, tmp_path, cfg=_tcfg(), config_hash="abc")
    m, payload = load_model(paths[1])
    assert payload["config_hash"] == "abc"
    assert param_checksum(m) == param_checksum(models[1])
