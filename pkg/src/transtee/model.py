"""The transformer treatment-effect estimator and its propensity head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    CrossParams,
    EncoderParams,
    MlpParams,
    cross_block,
    encoder_block,
    uniform_init,
)
from .tensor import ContractError, DimensionError, Tensor

CHECKPOINT_VERSION = 1
# keeps exp(raw) strictly positive after float underflow
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class TransTEEConfig:
    p: int
    n_treatments: int = 1
    has_dosage: bool = False
    d_model: int = 10
    n_heads: int = 2
    n_layers: int = 1
    head_hidden: int | None = None

    def __post_init__(self):
        if self.p < 1 or self.n_treatments < 1:
            raise ContractError("need p >= 1 and n_treatments >= 1")
        if self.d_model < self.n_heads:
            raise ContractError("d_model must be at least n_heads")
        if self.head_hidden is None:
            object.__setattr__(self, "head_hidden", self.d_model)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.n_layers)


@dataclass
class ForwardTrace:
    prediction: Tensor  # [batch]
    cross_weights: list[Tensor]  # per layer, [batch, heads, n_treatments, p]
    covariate_repr: Tensor  # pooled covariate-encoder output, [batch, d]


@dataclass
class ModelParams:
    cov_w: Tensor  # p x d, row i embeds covariate i
    cov_b: Tensor  # p x d
    treat_w: Tensor  # d
    treat_b: Tensor  # d
    dose_w: Tensor | None
    dose_b: Tensor | None
    fusion_w: Tensor | None  # 2d x d
    fusion_b: Tensor | None
    cov_layers: list[EncoderParams]
    treat_layers: list[EncoderParams]
    cross_layers: list[CrossParams]
    head: MlpParams
    propensity: MlpParams
    propensity_mode: str = "point"


def _named(params: ModelParams) -> dict[str, Tensor]:
    out = {
        "cov.w": params.cov_w,
        "cov.b": params.cov_b,
        "treat.w": params.treat_w,
        "treat.b": params.treat_b,
    }
    if params.dose_w is not None:
        out.update(
            {
                "dose.w": params.dose_w,
                "dose.b": params.dose_b,
                "fusion.w": params.fusion_w,
                "fusion.b": params.fusion_b,
            }
        )
    for stack, layers in (("cov_enc", params.cov_layers), ("treat_enc", params.treat_layers)):
        for i, blk in enumerate(layers):
            for k, v in blk.attn.tensors().items():
                out[f"{stack}.{i}.attn.{k}"] = v
            out[f"{stack}.{i}.norm.scale"] = blk.norm.scale
            out[f"{stack}.{i}.norm.shift"] = blk.norm.shift
            for k, v in blk.mlp.tensors().items():
                out[f"{stack}.{i}.mlp.{k}"] = v
    for i, blk in enumerate(params.cross_layers):
        for k, v in blk.attn.tensors().items():
            out[f"cross.{i}.attn.{k}"] = v
        for k, v in blk.mlp.tensors().items():
            out[f"cross.{i}.mlp.{k}"] = v
    for k, v in params.head.tensors().items():
        out[f"head.{k}"] = v
    return out


class TransTEE:
    """Outcome model mu_theta(x, t[, s]) with an attached propensity MLP pi_phi."""

    def __init__(self, config: TransTEEConfig, rng: np.random.Generator, propensity_mode: str = "point"):
        if propensity_mode not in ("point", "gaussian"):
            raise ContractError(f"unknown propensity mode {propensity_mode!r}")
        self.config = config
        cfg, d = config, config.d_model
        att = config.attention
        dosage = config.has_dosage
        self.params = ModelParams(
            cov_w=uniform_init(rng, (cfg.p, d), 1),
            cov_b=uniform_init(rng, (cfg.p, d), 1),
            treat_w=uniform_init(rng, (d,), 1),
            treat_b=uniform_init(rng, (d,), 1),
            dose_w=uniform_init(rng, (d,), 1) if dosage else None,
            dose_b=uniform_init(rng, (d,), 1) if dosage else None,
            fusion_w=uniform_init(rng, (2 * d, d), 2 * d) if dosage else None,
            fusion_b=uniform_init(rng, (d,), 2 * d) if dosage else None,
            cov_layers=[EncoderParams.init(att, rng) for _ in range(cfg.n_layers)],
            treat_layers=[EncoderParams.init(att, rng) for _ in range(cfg.n_layers)],
            cross_layers=[CrossParams.init(att, rng) for _ in range(cfg.n_layers)],
            head=MlpParams.init((d, cfg.head_hidden, 1), rng),
            propensity=MlpParams.init(
                (d, d, cfg.n_treatments * (2 if propensity_mode == "gaussian" else 1)), rng
            ),
            propensity_mode=propensity_mode,
        )

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> dict[str, Tensor]:
        """Outcome-model (theta) parameters by name."""
        return _named(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_propensity_parameters(self) -> dict[str, Tensor]:
        return {f"propensity.{k}": v for k, v in self.params.propensity.tensors().items()}

    def propensity_parameters(self) -> list[Tensor]:
        return list(self.named_propensity_parameters().values())

    def norm_states(self) -> dict[str, T.NormState]:
        out = {}
        for stack, layers in (("cov_enc", self.params.cov_layers), ("treat_enc", self.params.treat_layers)):
            for i, blk in enumerate(layers):
                out[f"{stack}.{i}.norm"] = blk.norm
        return out

    def count_params(self, include_propensity: bool = False) -> int:
        n = sum(p.data.size for p in self.parameters())
        if include_propensity:
            n += sum(p.data.size for p in self.propensity_parameters())
        return n

    # ------------------------------------------------------------ forward pieces

    def _check_treatments(self, t, s):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        if t.shape[-1] != self.config.n_treatments:
            raise DimensionError(f"expected {self.config.n_treatments} treatments, got shape {t.shape}")
        if (s is not None) != self.config.has_dosage:
            raise ContractError("dosage must be given exactly when the model has dosages")
        if s is not None:
            s = np.asarray(s, dtype=np.float64)
            if s.ndim == 1:
                s = s[:, None]
            if s.shape != t.shape:
                raise DimensionError(f"dosage shape {s.shape} != treatment shape {t.shape}")
        return t, s

    def embed_covariates(self, x) -> Tensor:
        """Row i of the output is covariate i's own affine map applied to x_i."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.p:
            raise DimensionError(f"expected {self.config.p} covariates, got {x.shape[-1]}")
        return Tensor(x[..., None]) * self.params.cov_w + self.params.cov_b

    def embed_treatment(self, t, s=None) -> Tensor:
        t, s = self._check_treatments(t, s)
        m_t = Tensor(t[..., None]) * self.params.treat_w + self.params.treat_b
        if s is None:
            return m_t
        m_s = Tensor(s[..., None]) * self.params.dose_w + self.params.dose_b
        return T.linear(T.concat([m_t, m_s], axis=-1), self.params.fusion_w, self.params.fusion_b)

    def encode_covariates(self, x, mode: str = "train") -> Tensor:
        m_x = self.embed_covariates(x)
        for blk in self.params.cov_layers:
            m_x = encoder_block(blk, m_x, mode)
        return m_x

    def forward_outcome(self, x, t, s=None, mode: str = "train", encoded_x: Tensor | None = None) -> ForwardTrace:
        m_x = self.encode_covariates(x, mode) if encoded_x is None else encoded_x
        m_st = self.embed_treatment(t, s)
        for blk in self.params.treat_layers:
            m_st = encoder_block(blk, m_st, mode)
        m = m_st
        weights = []
        for blk in self.params.cross_layers:
            m, w = cross_block(blk, m, m_x)
            weights.append(w)
        y = self.params.head(T.mean_pool(m))
        return ForwardTrace(T.reshape(y, y.shape[:-1]), weights, T.mean_pool(m_x))

    def forward_propensity(self, covariate_repr) -> Tensor | tuple[Tensor, Tensor]:
        """Point mode: predicted t per slot. Gaussian mode: (mean, variance)."""
        out = self.params.propensity(T._as_tensor(covariate_repr))
        if self.params.propensity_mode == "point":
            return out
        n = self.config.n_treatments
        return out[..., :n], T.exp(out[..., n:]) + VARIANCE_FLOOR

    def propensity(self, x, mode: str = "eval"):
        return self.forward_propensity(T.mean_pool(self.encode_covariates(x, mode)))

    def propensity_features(self, x) -> np.ndarray:
        """Pooled eval-mode covariate representation, the propensity head's input."""
        return T.mean_pool(self.encode_covariates(x, mode="eval")).data

    # ------------------------------------------------------------ inference

    def predict(self, x, t, s=None, chunk: int = 8192) -> np.ndarray:
        """Eval-mode predictions as a numpy vector, computed in chunks."""
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        out = np.empty(x.shape[0])
        for lo in range(0, x.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            trace = self.forward_outcome(x[sl], t[sl], None if s is None else np.asarray(s)[sl], mode="eval")
            out[sl] = trace.prediction.data
        return out

    def cross_attention(self, x, t, s=None) -> np.ndarray:
        """Per-unit cross-attention weight on each covariate, averaged over heads, layers and treatment tokens."""
        trace = self.forward_outcome(x, t, s, mode="eval")
        stacked = np.stack([w.data for w in trace.cross_weights])  # layers, batch, heads, n, p
        return stacked.mean(axis=(0, 2, 3))

    # ------------------------------------------------------------ checkpoints

    def save(self, path) -> None:
        """Plain-text checkpoint; floats are written in hex so loading is bit-exact."""
        lines = [f"transtee-checkpoint {CHECKPOINT_VERSION}"]
        lines.append("config " + json.dumps(asdict(self.config), sort_keys=True))
        lines.append(f"propensity_mode {self.params.propensity_mode}")
        entries = dict(self.named_parameters())
        entries.update(self.named_propensity_parameters())
        for name, state in self.norm_states().items():
            entries[f"{name}.running_mean"] = Tensor(state.running_mean)
            entries[f"{name}.running_var"] = Tensor(state.running_var)
        for name, tensor in entries.items():
            shape = ",".join(str(s) for s in tensor.shape)
            values = " ".join(float(v).hex() for v in tensor.data.reshape(-1))
            lines.append(f"{name} [{shape}] {values}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "TransTEE":
        lines = Path(path).read_text().splitlines()
        header = lines[0].split()
        if header[:1] != ["transtee-checkpoint"] or int(header[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        config = TransTEEConfig(**json.loads(lines[1].split(" ", 1)[1]))
        mode = lines[2].split()[1]
        model = cls(config, np.random.default_rng(0), propensity_mode=mode)
        entries = dict(model.named_parameters())
        entries.update(model.named_propensity_parameters())
        norms = model.norm_states()
        for line in lines[3:]:
            name, shape_txt, *values = line.split(" ")
            shape = tuple(int(s) for s in shape_txt.strip("[]").split(",") if s)
            arr = np.array([float.fromhex(v) for v in values], dtype=np.float64).reshape(shape)
            if name.endswith(".running_mean") or name.endswith(".running_var"):
                base, stat = name.rsplit(".", 1)
                setattr(norms[base], stat, arr)
            elif name in entries:
                if entries[name].shape != arr.shape:
                    raise ValueError(f"{path}: shape mismatch for {name}")
                entries[name].data = arr
            else:
                raise ValueError(f"{path}: unknown parameter {name}")
        return model


def attention_summary(weights: np.ndarray, groups: dict[str, list[int]]) -> dict[str, float]:
    """Sum the mean per-covariate attention within each group.

    ``weights`` is ``[units, p]`` (already averaged over heads/layers) or ``[p]``;
    ``groups`` maps a label to 0-based covariate indices and must partition them.
    """
    w = np.asarray(weights, dtype=np.float64)
    per_cov = w.mean(axis=0) if w.ndim == 2 else w
    p = per_cov.shape[0]
    flat = sorted(i for idx in groups.values() for i in idx)
    if flat != list(range(p)):
        raise ContractError("attention_summary: groups must partition the covariate indices")
    return {name: float(per_cov[list(idx)].sum()) for name, idx in groups.items()}
