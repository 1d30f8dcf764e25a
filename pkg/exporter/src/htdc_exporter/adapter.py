"""Thin wrapper around a vision-language checkpoint.

The wrapper talks to the model at the submodule level rather than through
``generate()`` because the probe branches need surgery that no generation
API exposes: the V0 branch perturbs the projected visual embeddings before
they enter the language model, and every recorded row reuses the model's
own output head on intermediate hidden states.

Supported checkpoints are the LLaVA family layout: a vision tower, a
multimodal projector, and a decoder-only language model sharing one output
head. Submodules are discovered by name so that both the pre-5.x layout
(submodules on the top-level model) and the current one (nested under
``.model``) load.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, ModelError

_HIDDEN_STATE_GUIDANCE = (
    "the model does not return per-layer hidden states; recording "
    "intermediate rows requires a checkpoint whose forward supports "
    "output_hidden_states=True"
)
_OOM_GUIDANCE = (
    "out of memory during export; retry with fewer --steps, a smaller "
    "--layers set, or bounded row storage via --policy topn:<N>"
)


def _first_attr(objects, names):
    for obj in objects:
        for name in names:
            found = getattr(obj, name, None)
            if found is not None:
                return found
    return None


@dataclass
class VisionLanguageAdapter:
    model: torch.nn.Module
    tokenizer: object
    image_processor: object
    vision_tower: torch.nn.Module
    projector: torch.nn.Module
    decoder: torch.nn.Module
    head: torch.nn.Module
    final_norm: torch.nn.Module | None
    num_layers: int
    vocab_size: int

    @classmethod
    def load(cls, model_id: str) -> "VisionLanguageAdapter":
        try:
            from transformers import AutoImageProcessor, AutoModelForImageTextToText, AutoTokenizer
        except ImportError as exc:
            raise ModelError(f"transformers is required to load models: {exc}") from None
        try:
            model = AutoModelForImageTextToText.from_pretrained(model_id)
            tokenizer = AutoTokenizer.from_pretrained(model_id)
            image_processor = AutoImageProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise ModelError(f"cannot load model {model_id!r}: {exc}") from None
        model.eval()

        scopes = [model, getattr(model, "model", model)]
        vision = _first_attr(scopes, ("vision_tower", "vision_model"))
        projector = _first_attr(scopes, ("multi_modal_projector", "mm_projector"))
        language = _first_attr(scopes, ("language_model",))
        if vision is None or projector is None or language is None:
            raise ModelError(
                f"model {model_id!r} does not expose the vision tower / projector / "
                "language model submodules this exporter hooks; only LLaVA-family "
                "layouts are supported"
            )
        # A CausalLM wrapper nests the decoder one level down.
        decoder = getattr(language, "model", language)
        head = model.get_output_embeddings()
        if head is None:
            raise ModelError(f"model {model_id!r} has no output head to project layers with")
        norm = _first_attr([decoder], ("norm", "final_layernorm", "ln_f"))

        text_cfg = getattr(model.config, "text_config", model.config)
        return cls(
            model=model,
            tokenizer=tokenizer,
            image_processor=image_processor,
            vision_tower=vision,
            projector=projector,
            decoder=decoder,
            head=head,
            final_norm=norm,
            num_layers=int(text_cfg.num_hidden_layers),
            vocab_size=int(text_cfg.vocab_size),
        )

    @property
    def eos_token_id(self) -> int | None:
        return getattr(self.tokenizer, "eos_token_id", None)

    def token_ids(self, text: str) -> list[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def token_label(self, token_id: int) -> str:
        label = self.tokenizer.convert_ids_to_tokens(int(token_id))
        return label if isinstance(label, str) else str(token_id)

    def pixel_values(self, image_path: str) -> torch.Tensor:
        try:
            from PIL import Image
        except ImportError as exc:
            raise ModelError(f"Pillow is required to read images: {exc}") from None
        try:
            with Image.open(image_path) as img:
                rgb = img.convert("RGB")
        except OSError as exc:
            raise DataError(f"cannot read image {image_path}: {exc}") from None
        return self.image_processor(images=rgb, return_tensors="pt")["pixel_values"]

    def visual_embeddings(self, pixel_values: torch.Tensor) -> torch.Tensor:
        """Project the image into language-model embedding space: [1, n, d]."""
        config = self.model.config
        feature_layer = getattr(config, "vision_feature_layer", -2)
        strategy = getattr(config, "vision_feature_select_strategy", "default")
        with torch.no_grad():
            out = self.vision_tower(pixel_values, output_hidden_states=True)
        hidden = getattr(out, "hidden_states", None)
        if hidden is None:
            raise ModelError(_HIDDEN_STATE_GUIDANCE)
        selected = hidden[feature_layer]
        if strategy == "default":
            selected = selected[:, 1:]  # drop the CLS position
        with torch.no_grad():
            return self.projector(selected)

    def embed_tokens(self, token_ids: list[int]) -> torch.Tensor:
        """Token embeddings as [1, len, d]; empty input embeds to [1, 0, d]."""
        embedding = self.model.get_input_embeddings()
        if not token_ids:
            width = embedding.weight.shape[1]
            return torch.zeros((1, 0, width), dtype=embedding.weight.dtype)
        with torch.no_grad():
            return embedding(torch.tensor([token_ids], dtype=torch.long))

    def prompt_embeddings(self, visual: torch.Tensor, text_ids: list[int]) -> torch.Tensor:
        """BOS, then the visual span, then the text tokens."""
        bos = getattr(self.tokenizer, "bos_token_id", None)
        prefix = self.embed_tokens([bos] if bos is not None else [])
        return torch.cat([prefix, visual, self.embed_tokens(text_ids)], dim=1)

    def step_rows(
        self, prefix_embeds: torch.Tensor, layers: tuple[int, ...]
    ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Final and per-layer logit rows at the last prefix position.

        Row j applies the decoder's final normalization to hidden state j
        before the shared head, except at the top layer whose hidden state
        comes back already normalized.
        """
        try:
            with torch.no_grad():
                out = self.decoder(
                    inputs_embeds=prefix_embeds, output_hidden_states=True, use_cache=False
                )
        except torch.cuda.OutOfMemoryError:
            raise ModelError(_OOM_GUIDANCE) from None
        except RuntimeError as exc:
            if "out of memory" in str(exc).lower():
                raise ModelError(_OOM_GUIDANCE) from None
            raise
        hidden = getattr(out, "hidden_states", None)
        if hidden is None:
            raise ModelError(_HIDDEN_STATE_GUIDANCE)

        def project(vec: torch.Tensor, normalize: bool) -> np.ndarray:
            if normalize and self.final_norm is not None:
                vec = self.final_norm(vec)
            with torch.no_grad():
                row = self.head(vec)
            return row.squeeze(0).to(torch.float64).numpy()

        top = len(hidden) - 1
        final = project(hidden[top][:, -1], normalize=False)
        rows = {j: project(hidden[j][:, -1], normalize=j != top) for j in layers}
        return final, rows
