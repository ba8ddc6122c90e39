import math
from types import SimpleNamespace

import pytest
import torch

from seqdiff.checkpoint import TrainedModel
from seqdiff.diffusion import LatentState
from seqdiff.sampling import (
    ReasoningOutput,
    SamplerConfig,
    ode_step,
    sample_dot,
    sample_multipass,
    self_consistency,
)
from seqdiff.schedule import lambda_at, respace, vp_coeffs_of_lambda
from seqdiff.textspace import EmbeddingTable, tokenize

from conftest import gen


class ScriptedDenoiser(torch.nn.Module):
    """Always predicts the embedding of a fixed full token sequence."""

    def __init__(self, vocab_size, embed_dim, max_len, script_ids):
        super().__init__()
        g = torch.Generator().manual_seed(42)
        # well-separated rows so rounding recovers tokens exactly
        weights = torch.randn(vocab_size, embed_dim, generator=g) * 3.0
        self.tok_emb = torch.nn.Embedding.from_pretrained(weights, freeze=True)
        self.cfg = SimpleNamespace(max_len=max_len, embed_dim=embed_dim, self_conditioning=False)
        self.script = torch.tensor(script_ids, dtype=torch.long)

    @property
    def table(self):
        return EmbeddingTable(weights=self.tok_emb.weight)

    def forward(self, z_t, t, mask, self_cond=None):
        return self.tok_emb(self.script[: z_t.shape[-2]])


def make_tm(vocab, script_ids, sched, max_len=16):
    model = ScriptedDenoiser(len(vocab), 8, max_len, script_ids)
    return TrainedModel(backend="continuous", model=model, vocab=vocab, sched=sched)


def script_for(vocab, text_tokens, max_len):
    ids = list(text_tokens) + [vocab.pad_id] * (max_len - len(text_tokens))
    return ids


def test_single_step_oracle_recovers_gold(mult_vocab, sched):
    x = tokenize("3 * 4", mult_vocab)
    y = tokenize("<<3*4=12>> #### 12", mult_vocab) + [mult_vocab.eos_id]
    tm = make_tm(mult_vocab, script_for(mult_vocab, x + y, 24), sched, max_len=24)
    cfg = SamplerConfig(T_steps=1, z_noise_temperature=0.0, logit_temperature=0.5)
    out = sample_dot(tm, x, cfg, gen(0))
    assert out.rationale_text == "<<3*4=12>> #### 12"
    assert out.answer == "12"
    assert out.passes == 1
    assert out.forward_calls == 1


@pytest.mark.parametrize("solver", ["ancestral", "ode1"])
def test_decoded_condition_always_equals_x(mult_vocab, sched, solver):
    x = tokenize("7 * 8", mult_vocab)
    y = tokenize("<<7*8=56>> #### 56", mult_vocab) + [mult_vocab.eos_id]
    tm = make_tm(mult_vocab, script_for(mult_vocab, x + y, 24), sched, max_len=24)
    cfg = SamplerConfig(T_steps=8, solver=solver, z_noise_temperature=0.5)
    out = sample_dot(tm, x, cfg, gen(1))
    assert out.answer == "56"
    assert out.forward_calls == 8 * out.passes


def test_solvers_agree_at_temperature_zero(mult_vocab, sched):
    x = tokenize("9 * 9", mult_vocab)
    y = tokenize("<<9*9=81>> #### 81", mult_vocab) + [mult_vocab.eos_id]
    tm = make_tm(mult_vocab, script_for(mult_vocab, x + y, 24), sched, max_len=24)
    a = sample_dot(tm, x, SamplerConfig(T_steps=64, z_noise_temperature=0.0), gen(2))
    b = sample_dot(tm, x, SamplerConfig(T_steps=256, solver="ode1", z_noise_temperature=0.0), gen(2))
    assert a.rationale_text == b.rationale_text


def test_clamp_to_embedding_flag(mult_vocab, sched):
    x = tokenize("2 * 2", mult_vocab)
    y = tokenize("<<2*2=4>> #### 4", mult_vocab) + [mult_vocab.eos_id]
    tm = make_tm(mult_vocab, script_for(mult_vocab, x + y, 24), sched, max_len=24)
    cfg = SamplerConfig(T_steps=4, z_noise_temperature=0.0, clamp_to_embedding=True)
    out = sample_dot(tm, x, cfg, gen(3))
    assert out.answer == "4"


def test_condition_too_long_rejected(mult_vocab, sched):
    tm = make_tm(mult_vocab, [0] * 8, sched, max_len=8)
    with pytest.raises(ValueError):
        sample_dot(tm, list(range(8)), SamplerConfig(T_steps=1), gen(0))


# --- ode_step unit behavior -------------------------------------------------


def test_ode_step_zero_denoiser_is_sigma_ratio(sched):
    z = torch.randn(3, 4, generator=gen(4))
    state = LatentState(z=z, t=2000.0, mask=torch.ones(3))
    out = ode_step(sched, state, 2000.0, 1000.0, torch.zeros(3, 4), torch.ones(3))
    lam_prev, lam_cur = lambda_at(sched, 2000.0), lambda_at(sched, 1000.0)
    _, s_prev = vp_coeffs_of_lambda(lam_prev)
    _, s_cur = vp_coeffs_of_lambda(lam_cur)
    assert torch.allclose(out.z, (s_cur / s_prev) * z)


def test_ode_step_identity_at_equal_times(sched):
    z = torch.randn(2, 4, generator=gen(5))
    state = LatentState(z=z, t=500.0, mask=torch.ones(2))
    out = ode_step(sched, state, 500.0, 500.0, torch.randn(2, 4, generator=gen(6)), torch.ones(2))
    assert torch.equal(out.z, z)


def test_ode_step_rejects_nonmonotone(sched):
    state = LatentState(z=torch.zeros(2, 4), t=100.0, mask=torch.ones(2))
    with pytest.raises(ValueError):
        ode_step(sched, state, 100.0, 200.0, torch.zeros(2, 4), torch.ones(2))


def test_ode_step_keeps_condition(sched):
    z = torch.randn(4, 3, generator=gen(7))
    mask = torch.tensor([0, 1, 1, 0])
    state = LatentState(z=z, t=1500.0, mask=mask)
    out = ode_step(sched, state, 1500.0, 700.0, torch.randn(4, 3, generator=gen(8)), mask)
    assert torch.equal(out.z[mask == 0], z[mask == 0])


def _exact_affine_solution(sched, A, z_start, lam_lo, lam_hi):
    """Matrix-exponential solution of the probability-flow ODE for z0_hat = A z.

    dz/dlam = [-sigmoid(lam)/2 I + (sigmoid(lam)/sqrt(sigmoid(-lam))) A] z; the
    coefficient matrices commute, so the solution is exp(Ia + Ab) z with the
    scalar integrals computed by adaptive quadrature.
    """
    import numpy as np
    from scipy.integrate import quad
    from scipy.linalg import expm

    a_int = -0.5 * (np.log1p(np.exp(lam_hi)) - np.log1p(np.exp(lam_lo)))  # -1/2 ∫ sigmoid

    def b(lam):
        sig = 1.0 / (1.0 + math.exp(-lam))
        return sig / math.sqrt(1.0 - sig)

    b_int, err = quad(b, lam_lo, lam_hi, limit=400)
    assert err < 1e-10
    M = a_int * np.eye(A.shape[0]) + b_int * A.numpy()
    return torch.tensor(expm(M), dtype=torch.float64) @ z_start


def _solver_error(sched, A, z_start, n_steps):
    sub, t_values = respace(sched, n_steps)
    mask = torch.ones(1)
    state = LatentState(z=z_start.reshape(1, -1).clone(), t=float(sched.T), mask=mask)
    for j in range(n_steps, 0, -1):
        z0_hat = state.z @ A.T.to(state.z.dtype)
        state = ode_step(sched, state, float(t_values[j]), float(t_values[j - 1]), z0_hat, mask)
    lam_lo = lambda_at(sched, float(sched.T))
    lam_hi = lambda_at(sched, 0.0)
    exact = _exact_affine_solution(sched, A, z_start.to(torch.float64), lam_lo, lam_hi)
    return (state.z.squeeze(0).to(torch.float64) - exact).norm().item()


def test_ode_solver_first_order_convergence(sched):
    g = gen(12)
    A = 0.25 * torch.randn(4, 4, generator=g, dtype=torch.float64)
    z_start = torch.randn(4, generator=g, dtype=torch.float64)
    errs = [_solver_error(sched, A, z_start, n) for n in (8, 16, 32, 64)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(3)]
    mean_order = sum(orders) / len(orders)
    assert 0.8 <= mean_order <= 1.2, (errs, orders)


# --- multi-pass -------------------------------------------------------------


def test_multipass_stops_on_first_eos(mult_vocab, sched):
    x = tokenize("3 * 4", mult_vocab)
    thought = tokenize("<<3*4=12>> #### 12", mult_vocab) + [mult_vocab.eos_id]
    tm = make_tm(mult_vocab, script_for(mult_vocab, x + thought, 32), sched, max_len=32)
    cfg = SamplerConfig(T_steps=2, z_noise_temperature=0.0, max_passes=5)
    out = sample_multipass(tm, x, cfg, gen(0))
    assert out.passes == 1
    assert not out.truncated
    assert out.answer == "12"
    assert out.forward_calls == out.passes * cfg.T_steps


def test_multipass_truncates_without_eos(mult_vocab, sched):
    x = tokenize("3 * 4", mult_vocab)
    junk = tokenize("1 2 3 4 5 6 7 8 9", mult_vocab)  # digits, never EOS/SEP
    tm = make_tm(mult_vocab, script_for(mult_vocab, x + junk + junk, 32), sched, max_len=32)
    cfg = SamplerConfig(T_steps=1, z_noise_temperature=0.0, max_passes=1)
    out = sample_multipass(tm, x, cfg, gen(0))
    assert out.truncated
    assert out.passes == 1


def test_multipass_two_rationale_walkthrough(mult_vocab, sched):
    """Scripted oracle: each pass reveals the next thought up to its separator."""
    x = tokenize("3 * 4", mult_vocab)
    r1 = tokenize("<<3*4=12>>", mult_vocab)
    r2 = tokenize("<<12+0=12>>", mult_vocab)
    ans = tokenize("#### 12", mult_vocab)
    full = x + r1 + [mult_vocab.sep_id] + r2 + [mult_vocab.sep_id] + ans + [mult_vocab.eos_id]
    tm = make_tm(mult_vocab, script_for(mult_vocab, full, 48), sched, max_len=48)
    cfg = SamplerConfig(T_steps=2, z_noise_temperature=0.0, max_passes=8)
    out = sample_multipass(tm, x, cfg, gen(0))
    assert out.passes == 3
    assert out.rationale_text == "<<3*4=12>> <<12+0=12>> #### 12"
    assert out.answer == "12"
    assert not out.truncated
    assert out.forward_calls == 3 * cfg.T_steps


# --- self-consistency -------------------------------------------------------


def r(answer):
    return ReasoningOutput(rationale_text="", answer=answer, passes=1, forward_calls=1, wallclock_s=0.0)


def test_majority_vote():
    assert self_consistency([r("5"), r("7"), r("5")]) == "5"


def test_single_sample():
    assert self_consistency([r("9")]) == "9"


def test_tie_breaks_on_first_occurrence():
    assert self_consistency([r("5"), r("7")]) == "5"
    assert self_consistency([r("7"), r("5")]) == "7"


def test_empty_answers_skipped():
    assert self_consistency([r(""), r("3"), r("")]) == "3"
    assert self_consistency([r(""), r("")]) == ""


def test_permutation_invariant_without_ties():
    outs = [r("1"), r("2"), r("2"), r("3"), r("2")]
    import itertools

    answers = {self_consistency(list(p)) for p in itertools.permutations(outs)}
    assert answers == {"2"}


def test_requires_nonempty_list():
    with pytest.raises(ValueError):
        self_consistency([])
