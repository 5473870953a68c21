"""DNF-Net and FCN models, their losses, and checkpoint I/O.

The DNF-Net stores all DNNF blocks packed side by side: one ``(d, M)`` literal
matrix whose columns are grouped by DNNF and, inside a DNNF, by conjunction.
Because every literal belongs to exactly one contiguous conjunction, the fixed
AND and OR layers reduce to segment sums.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .blocks import DnnfParams, DnnfSpec
from .localization import LocalizationParams, gated_embedding, sm_loc
from .selection import (
    MaskPair,
    P_GROUPS,
    assign_groups,
    binary_threshold,
    init_trainable_mask,
    regularizer,
    sample_stochastic_mask,
)

K_GROUPS = (6, 9, 12, 15)
CHECKPOINT_VERSION = 1
PREDICT_CHUNK = 2048

# preset -> (dnf_structure, feature_selection, localization)
ABLATIONS = {
    "exp1": (False, False, False),
    "exp2": (True, False, False),
    "exp3": (True, True, False),
    "exp4": (True, True, True),
    "exp5": (True, False, True),
    "exp6": (True, True, False),
    "exp7": (False, True, True),
}


class DataError(ValueError):
    """Raised for malformed data: bad labels, empty splits, missing values."""


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def _fan_in(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("empty batch")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: Tensor, labels, n_classes: int) -> Tensor:
    labels = _check_labels(labels, n_classes)
    if n_classes == 2:
        return ad.sigmoid_cross_entropy(logits, labels)
    return ad.softmax_cross_entropy(logits, labels)


class Model:
    """Shared plumbing: named parameters, prediction and checkpoint state."""

    kind = "model"
    n_classes: int

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def forward(self, x, training: bool = False) -> Tensor:
        raise NotImplementedError

    def loss(self, x, labels, training: bool = True) -> Tensor:
        raise NotImplementedError

    @property
    def task(self) -> str:
        return "binary" if self.n_classes == 2 else "multiclass"

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters().values())

    def predict_proba(self, x) -> np.ndarray:
        """P(y=1) per sample for binary tasks, class-probability rows otherwise."""
        x = np.asarray(x, dtype=np.float64)
        chunks = []
        for start in range(0, len(x), PREDICT_CHUNK):
            z = self.forward(x[start : start + PREDICT_CHUNK], training=False).data
            if self.n_classes == 2:
                chunks.append(ad._sigmoid(z.reshape(-1)))
            else:
                e = np.exp(z - z.max(axis=1, keepdims=True))
                chunks.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(chunks)

    # state used by checkpoints -------------------------------------------
    def spec_dict(self) -> dict:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        pass

    def get_weights(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            p.data = np.array(weights[name], dtype=np.float64)


# ---------------------------------------------------------------------------
# DNF-Net
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DnfNetSpec:
    n: int
    d: int
    n_classes: int = 2
    beta: float = 1.0
    dnf_structure: bool = True
    feature_selection: bool = True
    localization: bool = True
    epsilon: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ContractError("n and d must be positive")
        if self.n_classes < 2:
            raise ContractError("need at least two classes")

    @property
    def task(self) -> str:
        return "binary" if self.n_classes == 2 else "multiclass"

    @property
    def out_dim(self) -> int:
        return 1 if self.n_classes == 2 else self.n_classes

    def with_ablation(self, preset: str) -> "DnfNetSpec":
        try:
            dnf, fs, loc = ABLATIONS[preset]
        except KeyError:
            raise ContractError(f"unknown ablation preset {preset!r}") from None
        return replace(self, dnf_structure=dnf, feature_selection=fs, localization=loc)

    def dnnf_specs(self) -> list[DnnfSpec]:
        ks = assign_groups(self.n, K_GROUPS)
        ps = assign_groups(self.n, P_GROUPS)
        return [DnnfSpec.from_k(k, p) for k, p in zip(ks, ps)]


class DnfNet(Model):
    """An ensemble of ``n`` DNNF blocks with optional feature selection and
    localization, topped by a linear output layer.

    With ``dnf_structure=False`` the fixed AND/OR layers are replaced by fully
    trainable tanh layers of the same widths, so with every component off the
    model is a plain three-hidden-layer tanh network.
    """

    kind = "dnfnet"

    def __init__(self, spec: DnfNetSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.n_classes = spec.n_classes
        rng = np.random.default_rng(seed)
        self.rng = rng
        d, n = spec.d, spec.n
        self.dnnfs = spec.dnnf_specs()

        lengths = np.concatenate([blk.conj_lengths for blk in self.dnnfs]).astype(np.intp)
        self.conj_lengths = lengths
        self.conj_offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)
        ks = np.array([blk.k for blk in self.dnnfs], dtype=np.intp)
        self.ks = ks
        self.dnnf_conj_offsets = np.concatenate([[0], np.cumsum(ks)[:-1]]).astype(np.intp)
        ms = np.array([blk.m for blk in self.dnnfs], dtype=np.intp)
        self.literal_offsets = np.concatenate([[0], np.cumsum(ms)[:-1]]).astype(np.intp)
        self.literal_owner = np.repeat(np.arange(n), ms)
        self.n_literals = int(ms.sum())
        self.n_conj = int(ks.sum())

        self.W = Tensor(
            np.concatenate([_glorot(rng, d, blk.m, (d, blk.m)) for blk in self.dnnfs], axis=1),
            requires_grad=True,
            name="W",
        )
        self.b = Tensor(np.zeros(self.n_literals), requires_grad=True, name="b")

        self.m_s = None
        self.m_t = self.alpha = None
        if spec.feature_selection:
            self.m_s = np.stack([sample_stochastic_mask(d, blk.p, rng) for blk in self.dnnfs])
            self.m_t = Tensor(init_trainable_mask((n, d), rng, spec.epsilon), requires_grad=True, name="m_t")
            self.alpha = Tensor(np.zeros(n), requires_grad=True, name="alpha")

        self.W2 = self.b2 = self.W3 = self.b3 = None
        if not spec.dnf_structure:
            self.W2 = Tensor(_glorot(rng, self.n_literals, self.n_conj), requires_grad=True, name="W2")
            self.b2 = Tensor(np.zeros(self.n_conj), requires_grad=True, name="b2")
            self.W3 = Tensor(_glorot(rng, self.n_conj, n), requires_grad=True, name="W3")
            self.b3 = Tensor(np.zeros(n), requires_grad=True, name="b3")

        self.loc = LocalizationParams.init(n, d, rng) if spec.localization else None

        self.w_out = Tensor(_fan_in(rng, n, (n, spec.out_dim)), requires_grad=True, name="w_out")
        self.b_out = Tensor(np.zeros(spec.out_dim), requires_grad=True, name="b_out")
        self.threshold = binary_threshold

    def parameters(self) -> dict[str, Tensor]:
        params = {"W": self.W, "b": self.b}
        if self.m_t is not None:
            params.update(m_t=self.m_t, alpha=self.alpha)
        if self.W2 is not None:
            params.update(W2=self.W2, b2=self.b2, W3=self.W3, b3=self.b3)
        if self.loc is not None:
            params.update(mu=self.loc.mu, sigma=self.loc.sigma_diag, tau=self.loc.tau)
        params.update(w_out=self.w_out, b_out=self.b_out)
        return params

    # -- components ---------------------------------------------------------
    def mask_pair(self) -> MaskPair | None:
        """All DNNF masks as one row-batched :class:`MaskPair`."""
        if self.m_t is None:
            return None
        return MaskPair(self.m_s, self.m_t, self.alpha, self.spec.beta, self.spec.epsilon)

    def effective_masks(self) -> Tensor | None:
        """(n, d) binary masks T(m_t) * m_s, one row per DNNF."""
        if self.m_t is None:
            return None
        return self.threshold(self.m_t, self.spec.epsilon) * self.m_s

    def literals(self, x: Tensor) -> Tensor:
        W = self.W
        masks = self.effective_masks()
        if masks is not None:
            W = W * ad.transpose(ad.take_rows(masks, self.literal_owner))
        return ad.tanh(x @ W + self.b)

    def dnnf_outputs(self, x) -> Tensor:
        """(batch, n) matrix of DNNF outputs (the un-gated embedding)."""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.d:
            raise DimensionError(f"expected input of shape (batch, {self.spec.d}), got {x.shape}")
        lit = self.literals(x)
        if self.spec.dnf_structure:
            conj = ad.tanh(ad.segment_sum(lit, self.conj_offsets) - (self.conj_lengths - 1.5))
            return ad.tanh(ad.segment_sum(conj, self.dnnf_conj_offsets) + (self.ks - 1.5))
        hidden = ad.tanh(lit @ self.W2 + self.b2)
        return ad.tanh(hidden @ self.W3 + self.b3)

    def gates(self, x) -> Tensor | None:
        if self.loc is None:
            return None
        return sm_loc(x, self.loc)

    def embedding(self, x) -> Tensor:
        x = ad.as_tensor(x)
        out = self.dnnf_outputs(x)
        if self.loc is not None:
            out = gated_embedding(out, sm_loc(x, self.loc))
        return out

    def forward(self, x, training: bool = False) -> Tensor:
        """Logits: shape (batch,) for binary tasks, (batch, C) otherwise."""
        logits = self.embedding(x) @ self.w_out + self.b_out
        return ad.reshape(logits, (-1,)) if self.n_classes == 2 else logits

    def regularization(self) -> Tensor | None:
        masks = self.mask_pair()
        if masks is None:
            return None
        return ad.mean(regularizer(masks))

    def loss(self, x, labels, training: bool = True) -> Tensor:
        total = cross_entropy(self.forward(x, training), labels, self.n_classes)
        reg = self.regularization()
        return total if reg is None else total + reg

    def block(self, i: int) -> tuple[DnnfSpec, DnnfParams, MaskPair | None]:
        """Standalone view of DNNF ``i`` (copies of its parameters)."""
        blk = self.dnnfs[i]
        cols = slice(self.literal_offsets[i], self.literal_offsets[i] + blk.m)
        params = DnnfParams(
            Tensor(self.W.data[:, cols], requires_grad=True),
            Tensor(self.b.data[cols], requires_grad=True),
            blk.conj_matrix(),
        )
        mask = None
        if self.m_t is not None:
            mask = MaskPair(self.m_s[i], Tensor(self.m_t.data[i], requires_grad=True),
                            Tensor(self.alpha.data[i], requires_grad=True),
                            self.spec.beta, self.spec.epsilon)
        return blk, params, mask

    # -- checkpoint state ---------------------------------------------------
    def spec_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "spec": asdict(self.spec)}

    def buffers(self) -> dict[str, np.ndarray]:
        return {} if self.m_s is None else {"m_s": self.m_s}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        if "m_s" in buffers:
            self.m_s = np.array(buffers["m_s"], dtype=np.float64)


# ---------------------------------------------------------------------------
# FCN baseline
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FcnSpec:
    depth: int = 2
    width: int = 64
    width_scheme: str = "constant"
    dropout: float = 0.0
    l2: float = 0.0
    lr: float = 0.005

    def __post_init__(self):
        if self.depth < 0 or self.width < 1:
            raise ContractError("depth must be >= 0 and width >= 1")
        if self.width_scheme not in ("constant", "halving"):
            raise ContractError(f"unknown width scheme {self.width_scheme!r}")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")

    def widths(self) -> list[int]:
        if self.width_scheme == "constant":
            return [self.width] * self.depth
        return [max(1, math.ceil(self.width / 2**i)) for i in range(self.depth)]


class Fcn(Model):
    """Dense-ReLU-Dropout blocks followed by a linear output layer.

    ``input_mask`` selects how inputs are gated before the first block:
    ``None`` (no selection), ``"learned"`` (trainable straight-through mask with
    the regularizer, stochastic mask fixed to all-ones) or a fixed 0/1 vector
    (oracle selection).
    """

    kind = "fcn"

    def __init__(
        self,
        spec: FcnSpec,
        d: int,
        n_classes: int = 2,
        seed: int = 0,
        input_mask=None,
        beta: float = 1.0,
        epsilon: float = 1.0,
    ):
        self.spec = spec
        self.d = d
        self.n_classes = n_classes
        self.seed = seed
        self.beta = beta
        self.epsilon = epsilon
        rng = np.random.default_rng(seed)
        self.rng = rng
        self.layers: list[tuple[Tensor, Tensor]] = []
        fan_in = d
        for width in spec.widths():
            self.layers.append((
                Tensor(_glorot(rng, fan_in, width), requires_grad=True),
                Tensor(np.zeros(width), requires_grad=True),
            ))
            fan_in = width
        out_dim = 1 if n_classes == 2 else n_classes
        self.head = (
            Tensor(_glorot(rng, fan_in, out_dim), requires_grad=True),
            Tensor(np.zeros(out_dim), requires_grad=True),
        )

        self.mode = "none"
        self.oracle = None
        self.m_t = self.alpha = None
        if isinstance(input_mask, str):
            if input_mask != "learned":
                raise ContractError(f"unknown input mask mode {input_mask!r}")
            self.mode = "learned"
            self.m_t = Tensor(init_trainable_mask((d,), rng, epsilon), requires_grad=True, name="m_t")
            self.alpha = Tensor(0.0, requires_grad=True, name="alpha")
        elif input_mask is not None:
            oracle = np.asarray(input_mask, dtype=np.float64)
            if oracle.shape != (d,):
                raise DimensionError(f"oracle mask shape {oracle.shape} != ({d},)")
            self.mode = "oracle"
            self.oracle = oracle
        self.threshold = binary_threshold

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, (w, b) in enumerate(self.layers):
            params[f"dense{i}.w"] = w
            params[f"dense{i}.b"] = b
        params["head.w"], params["head.b"] = self.head
        if self.m_t is not None:
            params.update(m_t=self.m_t, alpha=self.alpha)
        return params

    def mask_pair(self) -> MaskPair | None:
        if self.m_t is None:
            return None
        return MaskPair(np.ones(self.d), self.m_t, self.alpha, self.beta, self.epsilon)

    def effective_mask(self) -> np.ndarray:
        if self.mode == "learned":
            return self.threshold(self.m_t, self.epsilon).data
        if self.mode == "oracle":
            return self.oracle
        return np.ones(self.d)

    def forward(self, x, training: bool = False) -> Tensor:
        h = ad.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.d:
            raise DimensionError(f"expected input of shape (batch, {self.d}), got {h.shape}")
        if self.mode == "learned":
            h = h * self.threshold(self.m_t, self.epsilon)
        elif self.mode == "oracle":
            h = h * self.oracle
        keep = 1.0 - self.spec.dropout
        for w, b in self.layers:
            h = ad.relu(h @ w + b)
            if training and self.spec.dropout > 0:
                h = h * ((self.rng.random(h.shape) < keep) / keep)
        w, b = self.head
        logits = h @ w + b
        return ad.reshape(logits, (-1,)) if self.n_classes == 2 else logits

    def regularization(self) -> Tensor | None:
        terms = []
        if self.spec.l2 > 0:
            l2 = ad.tsum(ad.square(self.layers[0][0])) if self.layers else None
            for w, _ in self.layers[1:]:
                l2 = l2 + ad.tsum(ad.square(w))
            if l2 is not None:
                terms.append(l2 * self.spec.l2)
        masks = self.mask_pair()
        if masks is not None:
            terms.append(regularizer(masks))
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def loss(self, x, labels, training: bool = True) -> Tensor:
        total = cross_entropy(self.forward(x, training), labels, self.n_classes)
        reg = self.regularization()
        return total if reg is None else total + reg

    def spec_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "spec": asdict(self.spec),
            "d": self.d,
            "n_classes": self.n_classes,
            "mode": self.mode,
            "beta": self.beta,
            "epsilon": self.epsilon,
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {} if self.oracle is None else {"oracle": self.oracle}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(model: Model, path) -> Path:
    """Write spec, parameters, fixed masks and RNG state to a versioned ``.npz``."""
    path = Path(path)
    header = {
        "format": "dnfnet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model": model.spec_dict(),
        "rng_state": model.rng.bit_generator.state,
    }
    arrays = {f"param/{k}": v for k, v in model.get_weights().items()}
    arrays.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # np.savez stamps entries with the current time; fixed timestamps keep reruns byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def build_model(desc: dict) -> Model:
    kind = desc["kind"]
    if kind == "dnfnet":
        return DnfNet(DnfNetSpec(**desc["spec"]), seed=desc["seed"])
    if kind == "fcn":
        mode = desc["mode"]
        input_mask = "learned" if mode == "learned" else (np.ones(desc["d"]) if mode == "oracle" else None)
        return Fcn(FcnSpec(**desc["spec"]), desc["d"], desc["n_classes"], desc["seed"],
                   input_mask=input_mask, beta=desc["beta"], epsilon=desc["epsilon"])
    raise ContractError(f"unknown model kind {kind!r}")


def load_checkpoint(path) -> Model:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != "dnfnet-checkpoint":
            raise ContractError(f"{path} is not a dnfnet checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ContractError(f"checkpoint version {header['version']} is newer than supported")
        model = build_model(header["model"])
        params = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("param/")}
        bufs = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("buffer/")}
    model.set_weights(params)
    model.load_buffers(bufs)
    if isinstance(model, Fcn) and "oracle" in bufs:
        model.oracle = np.array(bufs["oracle"], dtype=np.float64)
    model.rng.bit_generator.state = header["rng_state"]
    return model


def fcn_equivalent_widths(spec: DnfNetSpec) -> list[int]:
    """Hidden widths of the plain tanh network matching a DNF-Net's layers."""
    net_specs = spec.dnnf_specs()
    return [sum(b.m for b in net_specs), sum(b.k for b in net_specs), spec.n]
