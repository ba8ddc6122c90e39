"""seqdiff: desk-scale seq2seq text diffusion with reasoning-task tooling.

Train small diffusion language models (continuous latent or discrete-state)
from scratch on synthetic reasoning corpora, then sample rationale chains via
single-pass or thought-by-thought generation with ancestral or
exponential-integrator solvers and majority-vote aggregation.
"""

from .schedule import NoiseSchedule, make_sqrt_schedule, params_at, transition
from .textspace import Vocabulary, SeqPair, tokenize, detokenize, concat_pair, parse_answer
from .diffusion import LatentState, forward_noise, posterior, ancestral_step, anchor
from .denoiser import Denoiser, DenoiserConfig, init_denoiser
from .training import TrainConfig, compute_loss, train, encode_single_pass, encode_multipass
from .sampling import SamplerConfig, ReasoningOutput, sample_dot, sample_multipass, self_consistency
from .discrete import RateMatrix, GeometricNoise, ScoreNet, ScoreNetConfig, sample_discrete, train_discrete
from .tasks import Example, gen_mult, gen_bool, load_jsonl
from .evaluate import EvalReport, accuracy, throughput, reasoning_steps
from .checkpoint import TrainedModel, save_trained, load_trained

__version__ = "0.1.0"
