# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import logging
import math
from typing import TYPE_CHECKING, Any
from typing_extensions import override

import numpy as np

from lib.attnbias import AttentionBias
from lib.backends import BackendError, Capabilities, DenoiserBackend
from lib.grid import ImageGrid, LatentGrid
from lib.promptopt import PromptEmbedding
from lib.schedule import Schedule

if TYPE_CHECKING:
    from lib.config import StableDiffusionBackendConfig


logger = logging.getLogger(__name__)


def _import_stack() -> tuple[Any, Any]:
    try:
        import diffusers
        import torch
    except ImportError as e:
        raise BackendError(
            'The stable-diffusion backend requires torch, diffusers and transformers'
        ) from e

    return torch, diffusers


class BiasedCrossAttnProcessor:
    # The bias arrives per call through cross_attention_kwargs and is never
    # stored on the processor.

    def __init__(self, site: str, latent_size: tuple[int, int]) -> None:
        self.site = site
        self.latent_size = latent_size

    def _site_size(self, n: int) -> tuple[int, int]:
        h, w = self.latent_size
        factor = math.sqrt(h * w / n)
        return round(h / factor), round(w / factor)

    def _bias_mask(self, attn, bias: AttentionBias, query, key):
        torch, _ = _import_stack()

        n = query.shape[1]
        mask_flat = torch.as_tensor(
            bias.mask_flat(self._site_size(n)),
            dtype=query.dtype,
            device=query.device,
        )

        # get_attention_scores adds the mask after scaling Q K^T, so the bias
        # is pre-scaled to land inside the 1/sqrt(d_h) fraction.
        add = torch.zeros(
            (query.shape[0], n, key.shape[1]), dtype=query.dtype, device=query.device,
        )
        for j in bias.anomaly_indices:
            add[:, :, j] = attn.scale * bias.beta * mask_flat

        return add

    def __call__(
        self,
        attn,
        hidden_states,
        encoder_hidden_states=None,
        attention_mask=None,
        temb=None,
        delta_bias: AttentionBias | None = None,
    ):
        residual = hidden_states

        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch_size, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch_size, channel, height * width).transpose(1, 2)

        is_cross = encoder_hidden_states is not None
        batch_size, sequence_length, _ = (
            encoder_hidden_states.shape if is_cross else hidden_states.shape
        )
        attention_mask = attn.prepare_attention_mask(attention_mask, sequence_length, batch_size)

        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        query = attn.to_q(hidden_states)

        if not is_cross:
            encoder_hidden_states = hidden_states
        elif attn.norm_cross:
            encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)

        key = attn.to_k(encoder_hidden_states)
        value = attn.to_v(encoder_hidden_states)

        query = attn.head_to_batch_dim(query)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)

        if is_cross and delta_bias is not None and delta_bias.applies_to(self.site):
            add = self._bias_mask(attn, delta_bias, query, key)
            attention_mask = add if attention_mask is None else attention_mask + add

        attention_probs = attn.get_attention_scores(query, key, attention_mask)
        hidden_states = attention_probs @ value
        hidden_states = attn.batch_to_head_dim(hidden_states)

        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)

        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(batch_size, channel, height, width)

        if attn.residual_connection:
            hidden_states = hidden_states + residual

        return hidden_states / attn.rescale_output_factor


class StableDiffusionBackend(DenoiserBackend):
    def __init__(
        self,
        schedule: Schedule,
        pipe: Any,
        device: str,
        image_size: int,
    ) -> None:
        latent = image_size // pipe.vae_scale_factor
        channels = pipe.unet.config.in_channels

        super().__init__(
            Capabilities(
                latent_shape=(latent, latent, channels),
                image_shape=(image_size, image_size, 3),
                embedding_dim=pipe.text_encoder.config.hidden_size,
                supports_attention_bias=True,
                codec='VAE posterior mean (lossy)',
            ),
            schedule,
        )

        self.pipe = pipe
        self.device = device

        pipe.unet.set_attn_processor({
            name: BiasedCrossAttnProcessor(name.removesuffix('.processor'), (latent, latent))
            for name in pipe.unet.attn_processors
        })

        self._uncond = self._encode_text('')

    @classmethod
    def from_config(
        cls,
        cfg: 'StableDiffusionBackendConfig',
        schedule: Schedule,
    ) -> 'StableDiffusionBackend':
        torch, diffusers = _import_stack()

        logger.info(f'Loading {cfg.model_id} on {cfg.device} ({cfg.dtype})')

        pipe = diffusers.StableDiffusionPipeline.from_pretrained(
            cfg.model_id,
            torch_dtype=getattr(torch, cfg.dtype),
            safety_checker=None,
        )
        pipe = pipe.to(cfg.device)

        return cls(schedule, pipe, cfg.device, cfg.image_size)

    def _to_tensor(self, grid: np.ndarray):
        torch, _ = _import_stack()
        tensor = torch.from_numpy(np.ascontiguousarray(grid.transpose(2, 0, 1)))
        return tensor[None].to(self.device, dtype=self.pipe.unet.dtype)

    @staticmethod
    def _to_grid(tensor) -> np.ndarray:
        return tensor[0].float().cpu().numpy().transpose(1, 2, 0).astype(np.float64)

    @override
    def _predict_eps(
        self,
        z_t: LatentGrid,
        t: int,
        embedding: PromptEmbedding | None,
        bias: AttentionBias | None,
    ) -> LatentGrid:
        torch, _ = _import_stack()
        embedding = embedding or self._uncond

        context = torch.from_numpy(embedding.vectors)[None]
        context = context.to(self.device, dtype=self.pipe.unet.dtype)

        kwargs = {'delta_bias': bias} if bias is not None else None

        with torch.no_grad():
            eps = self.pipe.unet(
                self._to_tensor(z_t),
                t,
                encoder_hidden_states=context,
                cross_attention_kwargs=kwargs,
            ).sample

        return self._to_grid(eps)

    @override
    def _encode(self, image: ImageGrid) -> LatentGrid:
        torch, _ = _import_stack()
        vae = self.pipe.vae

        with torch.no_grad():
            posterior = vae.encode(self._to_tensor(image * 2.0 - 1.0)).latent_dist
            z0 = posterior.mean * vae.config.scaling_factor

        return self._to_grid(z0)

    @override
    def _decode(self, z0: LatentGrid) -> ImageGrid:
        torch, _ = _import_stack()
        vae = self.pipe.vae

        with torch.no_grad():
            image = vae.decode(self._to_tensor(z0) / vae.config.scaling_factor).sample

        return np.clip((self._to_grid(image) + 1.0) / 2.0, 0.0, 1.0)

    @override
    def _encode_text(self, text: str) -> PromptEmbedding:
        torch, _ = _import_stack()
        tokenizer = self.pipe.tokenizer

        ids = tokenizer(
            text,
            padding='max_length',
            max_length=tokenizer.model_max_length,
            truncation=True,
        ).input_ids

        with torch.no_grad():
            hidden = self.pipe.text_encoder(
                torch.tensor([ids], device=self.device),
            )[0][0]

        end = ids.index(tokenizer.eos_token_id)
        words = [w.removesuffix('</w>') for w in tokenizer.convert_ids_to_tokens(ids)]

        return PromptEmbedding(
            key=text,
            tokens=tuple(ids),
            words=tuple(words),
            vectors=hidden.float().cpu().numpy().astype(np.float64),
            special_indices=frozenset({0, *range(end, len(ids))}),
        )
