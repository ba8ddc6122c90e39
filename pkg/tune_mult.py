"""Scratch experiment: convergence of 2x2 multiplication training (not part of the package)."""
import sys
import time

import torch

from seqdiff.checkpoint import TrainedModel
from seqdiff.denoiser import DenoiserConfig, init_denoiser
from seqdiff.sampling import SamplerConfig, sample_dot
from seqdiff.schedule import make_sqrt_schedule
from seqdiff.tasks import gen_mult, split_by_question
from seqdiff.textspace import Vocabulary
from seqdiff.training import TrainConfig, encode_single_pass, train, step_generator, compute_loss

torch.set_num_threads(2)

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 5e-4
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 8000
embed_dim = int(sys.argv[3]) if len(sys.argv) > 3 else 32
eval_every = int(sys.argv[4]) if len(sys.argv) > 4 else 1000

exs = gen_mult(2, 2, mode="enumerate")
train_set, test_set = split_by_question(exs, 0.1)
print(f"train {len(train_set)} test {len(test_set)}", flush=True)
vocab = Vocabulary.from_texts([e.question for e in exs] + [e.target_text() for e in exs])
print("vocab", len(vocab), flush=True)

sched = make_sqrt_schedule(2000)
dn_cfg = DenoiserConfig(layers=4, model_dim=128, heads=4, ff_dim=512, max_len=48,
                        vocab_size=len(vocab), embed_dim=embed_dim)
ds = encode_single_pass(train_set, vocab, 48)

cfg = TrainConfig(lr=lr, steps=steps, batch=64, seq_len=48, seed=0)
model = init_denoiser(dn_cfg, cfg.seed)
opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
warmup = max(1, int(cfg.warmup_frac * cfg.steps))


def evaluate(n=200, t_steps=8):
    model.eval()
    tm = TrainedModel(backend="continuous", model=model, vocab=vocab, sched=sched)
    sc = SamplerConfig(T_steps=t_steps, z_noise_temperature=0.0)
    g = torch.Generator().manual_seed(123)
    hits = 0
    for ex in test_set[:n]:
        out = sample_dot(tm, ex.question, sc, g)
        hits += out.answer == ex.answer
    model.train()
    return hits / n


t0 = time.time()
model.train()
for step in range(cfg.steps):
    g = step_generator(cfg.seed, step)
    idx = torch.randint(len(ds), (cfg.batch,), generator=g)
    total, bd = compute_loss(model, (ds.tokens[idx], ds.mask[idx]), sched, cfg, step, g)
    opt.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    for grp in opt.param_groups:
        grp["lr"] = cfg.lr * min(1.0, (step + 1) / warmup)
    opt.step()
    if step % 200 == 0:
        print(f"step {step} loss {bd.total:.4f} diff {bd.diffusion:.4f} round {bd.rounding:.4f} "
              f"({(time.time()-t0)/(step+1)*1000:.0f} ms/step)", flush=True)
    if (step + 1) % eval_every == 0:
        acc = evaluate(100)
        print(f"== step {step+1}: acc@T8 = {acc:.3f}  elapsed {time.time()-t0:.0f}s", flush=True)
        if acc >= 0.99:
            acc_full = evaluate(200)
            print(f"== confirm acc {acc_full:.3f}", flush=True)
            if acc_full >= 0.99:
                print("early stop", flush=True)
                break

print(f"final acc@T8 (400): {evaluate(400):.4f}", flush=True)
print(f"total {time.time()-t0:.0f}s", flush=True)
