"""profitq: desk-scale quantization-aware training toolkit.

Pieces: a deterministic float64 autodiff engine, the DuQ learnable quantizer
(plus PACT and QIL baselines), a per-layer activation-instability metric,
progressive bit-width reduction with instability-guided layer freezing, the
negative-padding convolution rewrite for asymmetric activations, and a CLI
harness with toy depthwise-separable networks.
"""

from .aiwq import AiwqReport, ChannelStatsPair, channel_stats, gaussian_kl, layer_aiwq, sample_aiwq
from .config import (BitPhase, ConfigError, DataConfig, KdConfig, LayerSpec,
                     NetConfig, ProfitConfig, RunConfig, load_config,
                     micro_mobilenet)
from .model import Network, build_network
from .negpad import (H_SWISH_MIN, NegPadRewrite, negpad_bias, negpad_conv,
                     shift_decompose, verify_rewrite, zero_fraction)
from .optim import EmaState, SgdState, cosine_lr, ema_update, sgd_step
from .profit import (BitSchedule, FreezeSchedule, apply_freeze, build_schedule,
                     run_profit, run_progressive)
from .quant import (DuqQuantizer, PactParams, PactQuantizer, QilQuantizer,
                    QuantParams, duq_backward, duq_forward,
                    make_activation_quantizer, make_weight_quantizer,
                    pact_backward, pact_forward)
from .tensor import Tensor, conv2d, conv2d_raw
from .train import Trainer, evaluate_checkpoint, evaluate_network, kd_loss, train

__version__ = "0.1.0"
