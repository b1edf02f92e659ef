"""Online/target encoder pair with predictor head and momentum update.

The online trunk g and predictor h are trained by backprop; the target
trunk f is an exponential moving average of g and is never recorded on a
tape. Both forward paths end in l2 row normalization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .numkit import BatchNormState, Tape, Tensor

CHECKPOINT_MAGIC = "cmsf-checkpoint-v1"


@dataclass
class MLPSpec:
    """Layer widths plus per-layer batch-norm/relu flags.

    widths has len(layers)+1 entries; batch_norm/relu have one flag per
    layer. The final layer must stay linear.
    """

    widths: list[int]
    batch_norm: list[bool] = field(default_factory=list)
    relu: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MLPSpec needs at least one linear layer")
        n = len(self.widths) - 1
        if not self.batch_norm:
            self.batch_norm = [True] * (n - 1) + [False]
        if not self.relu:
            self.relu = [True] * (n - 1) + [False]
        if len(self.batch_norm) != n or len(self.relu) != n:
            raise ValueError("flag lists must have one entry per layer")
        if self.relu[-1] or self.batch_norm[-1]:
            raise ValueError("final layer must be linear (no activation)")

    @staticmethod
    def trunk(dim: int) -> "MLPSpec":
        """Default expand-then-project trunk: d -> 2d -> d."""
        return MLPSpec([dim, 2 * dim, dim])

    @staticmethod
    def predictor(dim: int) -> "MLPSpec":
        return MLPSpec([dim, 2 * dim, dim])


class Mlp:
    def __init__(self, spec: MLPSpec, rng: np.random.Generator):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.bn: list[BatchNormState | None] = []
        for i in range(len(spec.widths) - 1):
            fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
            self.weights.append(Tensor(numkit.he_uniform(rng, fan_in, fan_out)))
            self.biases.append(Tensor(np.zeros((1, fan_out))))
            self.bn.append(BatchNormState(fan_out) if spec.batch_norm[i] else None)

    def forward(self, x, tape: Tape | None = None, training: bool = False) -> Tensor:
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = numkit.add_bias(numkit.matmul(h, w, tape), b, tape)
            if self.bn[i] is not None:
                h = numkit.batch_norm_1d(h, self.bn[i], training, tape)
            if self.spec.relu[i]:
                h = numkit.relu(h, tape)
        return h

    def parameters(self) -> list[Tensor]:
        out = []
        for i in range(len(self.weights)):
            out.extend([self.weights[i], self.biases[i]])
            if self.bn[i] is not None:
                out.extend(self.bn[i].parameters())
        return out

    def arrays(self) -> list[np.ndarray]:
        """Every float array in declaration order, running stats included."""
        out = []
        for i in range(len(self.weights)):
            out.extend([self.weights[i].value, self.biases[i].value])
            if self.bn[i] is not None:
                s = self.bn[i]
                out.extend([s.gamma.value, s.beta.value,
                            s.running_mean, s.running_var])
        return out


class EncoderPair:
    """Target trunk f, online trunk g, predictor h, momentum m.

    The predictor sits only on the online path; the target path uses
    running batch-norm statistics so it is a pure function of its input.
    """

    def __init__(self, trunk_spec: MLPSpec, predictor_spec: MLPSpec,
                 momentum_m: float, rng: np.random.Generator):
        if not 0.0 <= momentum_m <= 1.0:
            raise ValueError("momentum_m must lie in [0, 1]")
        out_dim = trunk_spec.widths[-1]
        if predictor_spec.widths[0] != out_dim or predictor_spec.widths[-1] != out_dim:
            raise ValueError("predictor width must match encoder output width")
        self.online = Mlp(trunk_spec, rng)
        self.predictor = Mlp(predictor_spec, rng)
        self.target = Mlp(trunk_spec, rng)
        for dst, src in zip(self.target.arrays(), self.online.arrays()):
            dst[...] = src
        self.momentum_m = momentum_m

    @staticmethod
    def create(dim: int, momentum_m: float, rng: np.random.Generator) -> "EncoderPair":
        return EncoderPair(MLPSpec.trunk(dim), MLPSpec.predictor(dim), momentum_m, rng)

    @property
    def input_dim(self) -> int:
        return self.online.spec.widths[0]

    @property
    def embed_dim(self) -> int:
        return self.online.spec.widths[-1]

    def forward_target(self, x_batch: np.ndarray) -> np.ndarray:
        """u = l2-normalized f(x); never touches a tape."""
        h = self.target.forward(np.asarray(x_batch, dtype=np.float64))
        return numkit.l2_row_normalize(h).value

    def forward_online(self, x_batch: np.ndarray, tape: Tape,
                       training: bool = True) -> Tensor:
        """v = l2-normalized h(g(x)); gradient flows through g and h."""
        x = Tensor(np.asarray(x_batch, dtype=np.float64))
        h = self.online.forward(x, tape, training)
        h = self.predictor.forward(h, tape, training)
        return numkit.l2_row_normalize(h, tape=tape)

    def forward_online_trunk(self, x_batch: np.ndarray, tape: Tape,
                             training: bool = True) -> Tensor:
        """Trunk output before normalization (classifier-head input)."""
        x = Tensor(np.asarray(x_batch, dtype=np.float64))
        return self.online.forward(x, tape, training)

    def trainable_parameters(self) -> list[Tensor]:
        return self.online.parameters() + self.predictor.parameters()

    def momentum_update(self):
        m = self.momentum_m
        for tgt, onl in zip(self.target.arrays(), self.online.arrays()):
            tgt *= m
            tgt += (1.0 - m) * onl


# ---------------------------------------------------------------------------
# checkpoint format: JSON header line + little-endian float64 payload


def _spec_dict(spec: MLPSpec) -> dict:
    return {"widths": spec.widths, "batch_norm": spec.batch_norm, "relu": spec.relu}


def save_checkpoint(pair: EncoderPair, path):
    arrays = pair.online.arrays() + pair.predictor.arrays() + pair.target.arrays()
    header = {
        "magic": CHECKPOINT_MAGIC,
        "trunk": _spec_dict(pair.online.spec),
        "predictor": _spec_dict(pair.predictor.spec),
        "momentum_m": pair.momentum_m,
        "shapes": [list(a.shape) for a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> EncoderPair:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        pair = EncoderPair(
            MLPSpec(**header["trunk"]), MLPSpec(**header["predictor"]),
            header["momentum_m"], np.random.default_rng(0))
        arrays = pair.online.arrays() + pair.predictor.arrays() + pair.target.arrays()
        for a, shape in zip(arrays, header["shapes"]):
            if list(a.shape) != shape:
                raise ValueError("checkpoint shape mismatch")
            buf = fh.read(a.size * 8)
            a[...] = np.frombuffer(buf, dtype="<f8").reshape(a.shape)
    return pair
