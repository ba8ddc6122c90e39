import math
from types import SimpleNamespace

import pytest
import torch

from seqdiff.checkpoint import load_trained
from seqdiff.denoiser import DenoiserConfig, init_denoiser
from seqdiff.diffusion import forward_noise
from seqdiff.schedule import make_sqrt_schedule
from seqdiff.tasks import Example, gen_mult
from seqdiff.textspace import Vocabulary
from seqdiff.training import (
    TrainConfig,
    TrainingDiverged,
    compute_loss,
    couple_mask,
    encode_multipass,
    encode_single_pass,
    epsilon_at,
    oracle_probability,
    prior_loss,
    run_loop,
    scheduled_sampling_zt,
    step_generator,
    train,
)

from conftest import gen


def test_epsilon_endpoints_and_midpoint():
    assert epsilon_at(0, 1000, 0.95) == 1.0
    assert abs(epsilon_at(1000, 1000, 0.95) - 0.95) < 1e-12
    assert abs(epsilon_at(500, 1000, 0.95) - 0.975) < 1e-12
    with pytest.raises(ValueError):
        epsilon_at(-1, 10, 0.95)


def test_oracle_probability_semantics():
    assert oracle_probability(0.95, "oracle") == 0.95
    assert abs(oracle_probability(0.95, "inference") - 0.05) < 1e-12


class OracleDenoiser(torch.nn.Module):
    """Returns the clean embedding of preset gold tokens, whatever the input."""

    def __init__(self, weights, gold=None, self_conditioning=False):
        super().__init__()
        self.tok_emb = torch.nn.Embedding.from_pretrained(weights.clone(), freeze=False)
        self.cfg = SimpleNamespace(self_conditioning=self_conditioning)
        self.gold = gold

    def forward(self, z_t, t, mask, self_cond=None):
        return self.tok_emb(self.gold)


def test_scheduled_sampling_rejects_terminal(small_sched):
    model = OracleDenoiser(torch.eye(4))
    with pytest.raises(ValueError):
        scheduled_sampling_zt(torch.zeros(2, 4), torch.ones(2), small_sched.T, small_sched, model, gen(0))


def test_scheduled_branch_matches_oracle_distribution(small_sched):
    """With a perfect inner denoiser the scheduled z_t has the forward marginal."""
    weights = 2.0 * torch.eye(4)
    gold = torch.tensor([1, 2])
    model = OracleDenoiser(weights, gold=gold)
    z0 = model.tok_emb(gold)
    mask = torch.ones(2)
    t = 4
    n = 10_000
    g = gen(0)
    vals = torch.stack([scheduled_sampling_zt(z0, mask, t, small_sched, model, g).z for _ in range(n)])
    ab = small_sched.alpha_bar[t].item()
    want_mean = math.sqrt(ab) * z0
    want_var = 1 - ab
    mean_err = (vals.mean(0) - want_mean).abs().max().item()
    assert mean_err < 4 * math.sqrt(want_var / n)
    assert (vals.var(0) - want_var).abs().max().item() < 4 * want_var * math.sqrt(2.0 / n)


def test_scheduled_sampling_keeps_condition(small_sched):
    weights = torch.randn(6, 3, generator=gen(1))
    gold = torch.tensor([0, 1, 2, 3])
    model = OracleDenoiser(weights, gold=gold)
    z0 = torch.randn(4, 3, generator=gen(2))
    mask = torch.tensor([0, 0, 1, 1])
    out = scheduled_sampling_zt(z0, mask, 3, small_sched, model, gen(3))
    assert torch.equal(out.z[:2], z0[:2])


def test_couple_mask_gamma_zero():
    m = couple_mask(16, [(4, 8), (8, 12)], 1, 0.0, 1, gen(0))
    assert m.tolist() == [0] * 8 + [1] * 4 + [0] * 4


def test_couple_mask_extends_to_previous_thought():
    m = couple_mask(16, [(4, 8), (8, 12)], 1, 1.0, 1, gen(0))
    assert m.tolist() == [0] * 4 + [1] * 8 + [0] * 4


def test_couple_mask_clamps_at_first_thought():
    m = couple_mask(16, [(4, 8), (8, 12)], 1, 1.0, 3, gen(0))
    assert m.tolist() == [0] * 4 + [1] * 8 + [0] * 4


def test_couple_mask_rejects_bad_spans():
    with pytest.raises(ValueError):
        couple_mask(8, [(4, 2)], 0, 0.5, 1, gen(0))
    with pytest.raises(ValueError):
        couple_mask(8, [(0, 4), (3, 6)], 1, 0.5, 1, gen(0))
    with pytest.raises(ValueError):
        couple_mask(8, [(0, 4)], 1, 0.5, 1, gen(0))


def _mini_setup(eps_min=1.0, self_cond_prob=0.0, **cfg_kw):
    sched = make_sqrt_schedule(50)
    vocab_size = 8
    dn = DenoiserConfig(layers=1, model_dim=16, heads=2, ff_dim=32, max_len=8,
                        vocab_size=vocab_size, embed_dim=4)
    model = init_denoiser(dn, 0)
    tokens = torch.tensor([[1, 2, 3, 4, 5, 0, 0, 0], [2, 2, 6, 7, 5, 0, 0, 0]])
    mask = torch.tensor([[0, 0, 1, 1, 1, 1, 1, 1], [0, 0, 1, 1, 1, 1, 1, 1]])
    cfg = TrainConfig(steps=100, eps_min=eps_min, self_cond_prob=self_cond_prob, **cfg_kw)
    return sched, model, tokens, mask, cfg


def test_loss_zero_at_optimum(small_sched):
    weights = 4.0 * torch.eye(8)
    tokens = torch.tensor([[1, 2, 3], [4, 5, 6]])
    mask = torch.ones(2, 3, dtype=torch.long)
    model = OracleDenoiser(weights, gold=tokens)
    cfg = TrainConfig(steps=10, eps_min=1.0, self_cond_prob=0.0)
    total, bd = compute_loss(model, (tokens, mask), small_sched, cfg, 0, gen(0))
    assert bd.diffusion == 0.0
    margin = 16.0  # gold logit 16, all others 0
    assert bd.rounding <= math.log(1 + 7 * math.exp(-margin)) + 1e-6
    assert bd.total == bd.diffusion + bd.rounding


def test_loss_weights_positive_both_modes():
    sched, model, tokens, mask, _ = _mini_setup()
    snr = sched.alpha_bar / (1 - sched.alpha_bar)
    deltas = (snr[:-1] - snr[1:]) / 2
    assert (deltas > 0).all()
    for mode in ("uniform", "snr_delta"):
        cfg = TrainConfig(steps=10, eps_min=1.0, self_cond_prob=0.0, loss_weighting=mode)
        total, bd = compute_loss(model, (tokens, mask), sched, cfg, 0, gen(0))
        assert bd.total > 0 and math.isfinite(bd.total)


def test_condition_positions_do_not_contribute(small_sched):
    """Perturbing predictions on condition positions leaves the loss unchanged."""
    weights = torch.randn(8, 4, generator=gen(1))
    tokens = torch.tensor([[1, 2, 3, 4]])
    mask = torch.tensor([[0, 0, 1, 1]])

    class Shifted(OracleDenoiser):
        def forward(self, z_t, t, mask_arg, self_cond=None):
            out = super().forward(z_t, t, mask_arg)
            return out + 100.0 * (1 - mask_arg).unsqueeze(-1).to(out.dtype)

    base = OracleDenoiser(weights, gold=tokens)
    shifted = Shifted(weights, gold=tokens)
    cfg = TrainConfig(steps=10, eps_min=1.0, self_cond_prob=0.0)
    ta, ba = compute_loss(base, (tokens, mask), small_sched, cfg, 0, gen(5))
    tb, bb = compute_loss(shifted, (tokens, mask), small_sched, cfg, 0, gen(5))
    assert ba.total == bb.total


def test_plain_path_bit_identity():
    """eps == 1 and gamma == 0 reduces the pipeline to plain forward-noise training."""
    sched, model, tokens, mask, cfg = _mini_setup(eps_min=1.0, self_cond_prob=0.0, gamma=0.0)
    g1 = step_generator(0, 3)
    total, bd = compute_loss(model, (tokens, mask), sched, cfg, 3, g1)

    # independent plain reference, same draw order
    g2 = step_generator(0, 3)
    z0 = model.tok_emb(tokens)
    t = torch.randint(1, sched.T + 1, (2,), generator=g2)
    z_t = forward_noise(z0, mask, t, sched, g2).z
    z0_hat = model(z_t, t, mask)
    sq = ((z0 - z0_hat) ** 2).sum(-1)
    mf = mask.to(z0.dtype)
    diffusion = ((sq * mf).sum(1) / mf.sum(1)).mean()
    logits = z0 @ model.tok_emb.weight.T
    flat = mask.reshape(-1).bool()
    rounding = torch.nn.functional.cross_entropy(
        logits.reshape(-1, 8)[flat], tokens.reshape(-1)[flat]
    )
    assert bd.total == (diffusion + rounding).item()
    assert bd.diffusion == diffusion.item()
    assert bd.rounding == rounding.item()
    assert not any(bd.used_scheduled_branch)


def test_branch_frequencies_match_epsilon():
    sched, model, tokens, mask, _ = _mini_setup()
    cfg = TrainConfig(steps=100, eps_min=0.95, self_cond_prob=0.0)
    n_calls, batch = 200, 50
    flags = []
    big_tokens = tokens.repeat(batch // 2, 1)
    big_mask = mask.repeat(batch // 2, 1)
    for i in range(n_calls):
        _, bd = compute_loss(model, (big_tokens, big_mask), sched, cfg, cfg.steps, step_generator(7, i))
        flags.extend(bd.used_scheduled_branch)
    n = len(flags)
    frac = sum(flags) / n
    p = 0.05 * (1 - 1 / sched.T)  # t == T forces the oracle branch
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_gradient_matches_finite_differences_through_loss():
    sched, model, tokens, mask, cfg = _mini_setup(eps_min=1.0, self_cond_prob=0.0)
    model = model.double()
    seed = 123

    def loss_at(step=0):
        total, _ = compute_loss(model, (tokens, mask), sched, cfg, step, step_generator(seed, step))
        return total

    loss = loss_at()
    model.zero_grad()
    loss.backward()
    params = {n: p for n, p in model.named_parameters() if p.grad is not None}
    names = list(params)
    g = gen(3)
    checked = passed = 0
    for _ in range(60):
        name = names[int(torch.randint(len(names), (1,), generator=g))]
        p = params[name]
        flat = p.detach().reshape(-1)
        j = int(torch.randint(flat.numel(), (1,), generator=g))
        eps = 1e-3
        with torch.no_grad():
            orig = flat[j].item()
            flat[j] = orig + eps
            hi = loss_at().item()
            flat[j] = orig - eps
            lo = loss_at().item()
            flat[j] = orig
        fd = (hi - lo) / (2 * eps)
        ad = p.grad.reshape(-1)[j].item()
        checked += 1
        if abs(fd - ad) / max(abs(fd), abs(ad), 1e-8) < 1e-2:
            passed += 1
    assert passed / checked >= 0.95


def test_loss_rejects_empty_batch(small_sched):
    model = OracleDenoiser(torch.eye(4), gold=torch.zeros(0, 0, dtype=torch.long))
    cfg = TrainConfig(steps=1)
    with pytest.raises(ValueError):
        compute_loss(model, (torch.zeros(0, 0, dtype=torch.long), torch.zeros(0, 0)), small_sched, cfg, 0, gen(0))


def test_prior_loss_is_small_for_deep_schedules(sched):
    z0 = torch.randn(4, 8, generator=gen(0))
    val = prior_loss(z0, torch.ones(4), sched)
    assert math.isfinite(val)
    assert abs(val) < 0.01  # alpha_bar_T is tiny, so q(z_T) is nearly standard normal


def test_encode_single_pass_layout(mult_vocab):
    ex = Example(question="3 * 4", rationales=("<<3*4=12>>",), answer="12")
    ds = encode_single_pass([ex], mult_vocab, 24)
    assert ds.tokens.shape == (1, 24)
    x_len = int((ds.mask[0] == 0).sum())
    assert x_len == 3  # "3", "*", "4"
    y = ds.tokens[0, ds.mask[0] == 1]
    assert y[-1] == mult_vocab.pad_id
    assert mult_vocab.eos_id in y.tolist()


def test_encode_multipass_layout(mult_vocab):
    ex = Example(question="3 * 4", rationales=("<<3*4=12>>",), answer="12")
    ds = encode_multipass([ex], mult_vocab, 24)
    assert len(ds) == 2  # one pass per thought: rationale, then the answer segment
    assert ds.current == [0, 1]
    # second row conditions on the first thought
    r0_len = ds.spans[0][0][1] - ds.spans[0][0][0]
    assert int((ds.mask[1] == 0).sum()) == 3 + r0_len
    # spans sit where the tokens say they sit
    for row in range(2):
        for (lo, hi) in ds.spans[row]:
            assert 0 <= lo < hi <= 24
    # last thought terminates with EOS, earlier ones with SEP
    last_span = ds.spans[1][1]
    assert ds.tokens[1, last_span[1] - 1] == mult_vocab.eos_id
    first_span = ds.spans[1][0]
    assert ds.tokens[1, first_span[1] - 1] == mult_vocab.sep_id


def _train_setup(tmp_path, steps=30, **kw):
    exs = gen_mult(1, 1, mode="enumerate")
    vocab = Vocabulary.from_texts([e.question for e in exs] + [e.target_text() for e in exs])
    ds = encode_single_pass(exs, vocab, 16)
    sched = make_sqrt_schedule(50)
    dn = DenoiserConfig(layers=1, model_dim=16, heads=2, ff_dim=32, max_len=16,
                        vocab_size=len(vocab), embed_dim=4)
    cfg = TrainConfig(steps=steps, batch=8, seq_len=16, seed=3, **kw)
    return cfg, ds, dn, sched


def test_training_reduces_smoothed_loss(tmp_path):
    cfg, ds, dn, sched = _train_setup(tmp_path, steps=150, lr=1e-3)
    summary = train(cfg, ds, dn, sched, log_every=0)
    losses = [row["total"] for row in summary["history"]]
    k = 30
    assert sum(losses[-k:]) / k < 0.7 * sum(losses[:k]) / k


def test_zero_lr_keeps_parameters(tmp_path):
    cfg, ds, dn, sched = _train_setup(tmp_path, steps=5, lr=0.0)
    before = {k: v.clone() for k, v in init_denoiser(dn, cfg.seed).state_dict().items()}
    summary = train(cfg, ds, dn, sched, log_every=0)
    after = summary["model"].state_dict()
    for k in before:
        assert torch.equal(before[k], after[k])


def test_zero_steps_checkpoint_is_initialization(tmp_path):
    cfg, ds, dn, sched = _train_setup(tmp_path, steps=0)
    train(cfg, ds, dn, sched, out_dir=tmp_path / "run", log_every=0)
    tm = load_trained(tmp_path / "run" / "step-0000000")
    init = init_denoiser(dn, cfg.seed)
    for (k, a), (_, b) in zip(init.state_dict().items(), tm.model.state_dict().items()):
        assert torch.equal(a, b), k


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg, ds, dn, sched = _train_setup(tmp_path, steps=20, checkpoint_every=10)
    full = train(cfg, ds, dn, sched, out_dir=tmp_path / "full", log_every=0)
    resumed = train(cfg, ds, dn, sched, out_dir=tmp_path / "resumed", log_every=0,
                    resume_from=str(tmp_path / "full" / "step-0000010"))
    full_tail = [row["total"] for row in full["history"][10:]]
    resumed_tail = [row["total"] for row in resumed["history"]]
    assert full_tail == resumed_tail
    a = full["model"].state_dict()
    b = resumed["model"].state_dict()
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_divergence_aborts_with_last_checkpoint(tmp_path):
    cfg, ds, dn, sched = _train_setup(tmp_path, steps=10, checkpoint_every=2)
    model = init_denoiser(dn, 0)

    calls = {"n": 0}

    def exploding_loss(m, batch, step, g):
        calls["n"] += 1
        if step >= 5:
            raise TrainingDiverged(step, None)
        out = m(m.tok_emb(batch[0]), 1, batch[1])
        return out.pow(2).mean(), {"total": 1.0, "diffusion": 1.0, "rounding": 0.0, "eps_i": 1.0}

    with pytest.raises(TrainingDiverged) as err:
        run_loop(model, exploding_loss, ds, cfg, out_dir=tmp_path / "div",
                 save_fn=lambda m, o, s, p: load_or_save(m, p), log_every=0)
    assert err.value.last_checkpoint is not None
    assert "step-0000004" in err.value.last_checkpoint


def load_or_save(model, path):
    import os

    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "marker"), "w") as f:
        f.write("ok")
