"""
Encoder-decoder transformer with residual adapter layers.

Adapters sit after the source embedding and after every encoder layer
(optionally after every decoder layer too). With all adapters disabled the
network is the plain base model; the datastore key is the decoder output after
the final layer norm, before the output projection.
"""

import math
from collections.abc import Sequence
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ContractError, DimensionError, LengthError
from .models import BOS, EOS, PAD, AdapterSites, ModelConfig

LN_EPS = 1e-5

# Keep the reference attention path everywhere so batched, incremental and
# double-precision passes share the same arithmetic.
torch.backends.mha.set_fastpath_enabled(False)


class AdapterParams(NamedTuple):
    w1: Tensor  # d_model x adapter_hidden
    w2: Tensor  # adapter_hidden x d_model
    ln_gain: Tensor  # d_model
    ln_bias: Tensor  # d_model


def adapter_forward(h: Tensor, params: AdapterParams) -> Tensor:
    """H + W2 · ReLU(W1 · LN(H)), position-wise over the last dimension."""
    if h.dim() == 0 or h.numel() == 0:
        raise DimensionError("adapter input must be a non-empty sequence")
    d = h.shape[-1]
    hidden = params.w1.shape[-1]
    if (
        params.w1.shape != (d, hidden)
        or params.w2.shape != (hidden, d)
        or params.ln_gain.shape != (d,)
        or params.ln_bias.shape != (d,)
    ):
        raise DimensionError(
            f"adapter shapes w1={tuple(params.w1.shape)} w2={tuple(params.w2.shape)} "
            f"do not match model dimension {d}"
        )
    z = F.layer_norm(h, (d,), params.ln_gain, params.ln_bias, LN_EPS) @ params.w1
    return h + F.relu(z) @ params.w2


class Adapter(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        bound = 1.0 / math.sqrt(d_model)
        self.w1 = nn.Parameter(torch.empty(d_model, hidden).uniform_(-bound, bound))
        # W2 = 0 makes a fresh adapter the identity map.
        self.w2 = nn.Parameter(torch.zeros(hidden, d_model))
        self.ln_gain = nn.Parameter(torch.ones(d_model))
        self.ln_bias = nn.Parameter(torch.zeros(d_model))

    def params(self) -> AdapterParams:
        return AdapterParams(self.w1, self.w2, self.ln_gain, self.ln_bias)

    def forward(self, h: Tensor) -> Tensor:
        return adapter_forward(h, self.params())


class AdapterStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, hidden = cfg.d_model, cfg.adapter_hidden
        self.embed = Adapter(d, hidden)
        self.encoder = nn.ModuleList(Adapter(d, hidden) for _ in range(cfg.n_enc_layers))
        self.decoder = nn.ModuleList(
            Adapter(d, hidden)
            for _ in range(
                cfg.n_dec_layers if cfg.adapter_sites == AdapterSites.ENCODER_DECODER else 0
            )
        )


def sinusoidal_positions(n_positions: int, d_model: int) -> Tensor:
    position = torch.arange(n_positions, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    table = torch.zeros(n_positions, d_model)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table


def source_ids(source: Sequence[int]) -> list[int]:
    """Encoder input: source + EOS (a source already ending in EOS is kept as is)."""
    source = list(source)
    return source if source and source[-1] == EOS else [*source, EOS]


def pad_batch(seqs: Sequence[Sequence[int]], device=None) -> tuple[Tensor, Tensor]:
    """Right-pad with PAD; returns (ids, padding mask with True at PAD)."""
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, ids.eq(PAD)


class TranslationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size is None:
            raise ValueError("ModelConfig.vocab_size must be set before building a model")
        self.cfg = cfg
        d = cfg.d_model
        self.embed_scale = math.sqrt(d)

        self.embed = nn.Embedding(cfg.vocab_size, d, padding_idx=PAD)
        nn.init.normal_(self.embed.weight, mean=0.0, std=d**-0.5)
        with torch.no_grad():
            self.embed.weight[PAD].zero_()
        self.register_buffer(
            "positions", sinusoidal_positions(2 * cfg.max_len + 16, d), persistent=False
        )
        self.dropout = nn.Dropout(cfg.dropout)

        self.encoder_layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d, cfg.n_heads, cfg.d_ff, cfg.dropout, batch_first=True, norm_first=True
            )
            for _ in range(cfg.n_enc_layers)
        )
        self.encoder_norm = nn.LayerNorm(d, eps=LN_EPS)
        self.decoder_layers = nn.ModuleList(
            nn.TransformerDecoderLayer(
                d, cfg.n_heads, cfg.d_ff, cfg.dropout, batch_first=True, norm_first=True
            )
            for _ in range(cfg.n_dec_layers)
        )
        self.decoder_norm = nn.LayerNorm(d, eps=LN_EPS)

        self.adapters = AdapterStack(cfg) if cfg.adapter_sites != AdapterSites.NONE else None

    # -- parameter groups -------------------------------------------------

    def base_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("adapters.")]

    def adapter_parameters(self):
        return list(self.adapters.parameters()) if self.adapters is not None else []

    def freeze_base(self) -> None:
        for p in self.base_parameters():
            p.requires_grad_(False)

    # -- batched passes ---------------------------------------------------

    def _embed(self, ids: Tensor) -> Tensor:
        if ids.shape[1] > self.positions.shape[0]:
            raise LengthError(
                f"sequence length {ids.shape[1]} exceeds position table "
                f"({self.positions.shape[0]})"
            )
        x = self.embed(ids) * self.embed_scale + self.positions[: ids.shape[1]].to(
            self.embed.weight.dtype
        )
        return self.dropout(x)

    def encode_batch(self, src: Tensor, src_pad: Tensor, use_adapters: bool = False) -> Tensor:
        adapters = self.adapters if use_adapters else None
        x = self._embed(src)
        if adapters is not None:
            x = adapters.embed(x)
        for i, layer in enumerate(self.encoder_layers):
            x = layer(x, src_key_padding_mask=src_pad)
            if adapters is not None:
                x = adapters.encoder[i](x)
        return self.encoder_norm(x)

    def decode_batch(
        self,
        tgt_in: Tensor,
        memory: Tensor,
        src_pad: Tensor,
        tgt_pad: Tensor | None = None,
        use_adapters: bool = False,
    ) -> Tensor:
        """Decoder states after the final layer norm, one per input position."""
        adapters = self.adapters if use_adapters else None
        length = tgt_in.shape[1]
        causal = torch.triu(
            torch.ones(length, length, dtype=torch.bool, device=tgt_in.device), diagonal=1
        )
        y = self._embed(tgt_in)
        for i, layer in enumerate(self.decoder_layers):
            y = layer(
                y,
                memory,
                tgt_mask=causal,
                tgt_key_padding_mask=tgt_pad,
                memory_key_padding_mask=src_pad,
            )
            if adapters is not None and len(adapters.decoder) > 0:
                y = adapters.decoder[i](y)
        return self.decoder_norm(y)

    def project(self, h: Tensor) -> Tensor:
        return F.linear(h, self.embed.weight)

    def forward(
        self,
        src: Tensor,
        src_pad: Tensor,
        tgt_in: Tensor,
        tgt_pad: Tensor | None = None,
        use_adapters: bool = False,
    ) -> Tensor:
        memory = self.encode_batch(src, src_pad, use_adapters)
        h = self.decode_batch(tgt_in, memory, src_pad, tgt_pad, use_adapters)
        return self.project(h)

    def forced_reps_batch(
        self,
        sources: Sequence[Sequence[int]],
        targets: Sequence[Sequence[int]],
        use_adapters: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Teacher-forced decoder states for a batch.

        Returns (h, valid) with h of shape (B, max|y|+1, d); valid marks the
        |y|+1 real positions of each row (the last one predicts EOS).
        """
        if len(sources) != len(targets):
            raise ContractError("sources and targets must have the same length")
        device = self.embed.weight.device
        src, src_pad = pad_batch([self._checked_source(s) for s in sources], device)
        tgt_in, tgt_pad = pad_batch([[BOS, *t] for t in targets], device)
        memory = self.encode_batch(src, src_pad, use_adapters)
        h = self.decode_batch(tgt_in, memory, src_pad, tgt_pad, use_adapters)
        return h, ~tgt_pad

    # -- single-sentence operations ---------------------------------------

    def _checked_source(self, x: Sequence[int]) -> list[int]:
        ids = source_ids(x)
        if len(ids) > self.cfg.max_len:
            raise LengthError(f"source length {len(ids)} exceeds max_len {self.cfg.max_len}")
        return ids

    def encode(self, x: Sequence[int], use_adapters: bool = False) -> Tensor:
        """Encoder states (|x|+1, d) for one source sentence."""
        device = self.embed.weight.device
        src, src_pad = pad_batch([self._checked_source(x)], device)
        return self.encode_batch(src, src_pad, use_adapters)[0]

    def decode_step(
        self, enc_out: Tensor, y_prefix: Sequence[int], use_adapters: bool = False
    ) -> tuple[Tensor, Tensor]:
        """(h, p_NMT) for the next position after ``y_prefix`` (which starts with BOS)."""
        h, p = self.decode_step_batch(enc_out, [y_prefix], use_adapters)
        return h[0], p[0]

    def decode_step_batch(
        self,
        enc_out: Tensor,
        prefixes: Sequence[Sequence[int]],
        use_adapters: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Next-position states and distributions for equal-length prefixes."""
        if not prefixes or any(len(p) == 0 for p in prefixes):
            raise ContractError("decode_step needs a non-empty prefix")
        if any(p[0] != BOS for p in prefixes):
            raise ContractError("prefix must begin with BOS")
        if len({len(p) for p in prefixes}) != 1:
            raise ContractError("batched prefixes must have equal length")
        if len(prefixes[0]) > self.positions.shape[0]:
            raise LengthError(f"prefix length {len(prefixes[0])} exceeds position table")
        device = self.embed.weight.device
        tgt_in = torch.as_tensor([list(p) for p in prefixes], dtype=torch.long, device=device)
        memory = enc_out.unsqueeze(0).expand(len(prefixes), -1, -1)
        src_pad = torch.zeros(memory.shape[:2], dtype=torch.bool, device=device)
        h = self.decode_batch(tgt_in, memory, src_pad, None, use_adapters)[:, -1]
        return h, torch.softmax(self.project(h), dim=-1)

    def forced_decode_reps(
        self,
        source: Sequence[int],
        target: Sequence[int],
        use_adapters: bool = False,
    ) -> Tensor:
        """Rows t = 0..|y| hold h(x, y_<t+1); the last row predicts EOS."""
        h, _ = self.forced_reps_batch([source], [target], use_adapters)
        return h[0]
