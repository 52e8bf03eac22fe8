"""Low-rank adapter injection and merging for causal LMs.

Works on both nn.Linear and the Conv1D projection modules GPT-style models
use; the adapter delta is W + (alpha/rank) * B A with B zero-initialized, so
an untrained adapter is an exact no-op.
"""

from __future__ import annotations

import torch
from torch import nn


class LoraAdapter(nn.Module):
    """Wraps a frozen projection module and adds a trainable low-rank delta."""

    def __init__(self, wrapped: nn.Module, in_features: int, out_features: int,
                 rank: int, alpha: float):
        super().__init__()
        self.wrapped = wrapped
        self.lora_a = nn.Parameter(torch.empty(rank, in_features))
        self.lora_b = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.normal_(self.lora_a, std=0.02)
        self.scaling = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.wrapped(x) + (x @ self.lora_a.T @ self.lora_b.T) * self.scaling

    def delta(self) -> torch.Tensor:
        """The (out_features, in_features) weight update this adapter encodes."""
        return (self.lora_b @ self.lora_a) * self.scaling


def _projection_features(module: nn.Module) -> tuple[int, int] | None:
    if isinstance(module, nn.Linear):
        return module.in_features, module.out_features
    if module.__class__.__name__ == "Conv1D":  # transformers' (in, out) layout
        weight = module.weight
        return weight.shape[0], weight.shape[1]
    return None


def inject_adapters(model: nn.Module, rank: int, alpha: float,
                    target_suffixes: tuple[str, ...]) -> int:
    """Freeze the model and wrap every targeted projection with an adapter.

    Returns the number of adapters injected.
    """
    for param in model.parameters():
        param.requires_grad = False
    injected = 0
    for name, module in list(model.named_modules()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf not in target_suffixes:
            continue
        features = _projection_features(module)
        if features is None:
            continue
        parent = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
        setattr(parent, leaf, LoraAdapter(module, features[0], features[1],
                                          rank, alpha))
        injected += 1
    return injected


def _untie_if_shared(model: nn.Module, module: nn.Module) -> None:
    # Merging into a weight shared with the embedding matrix would corrupt the
    # embeddings; clone the tensor and drop the tie before touching it.
    weight = module.weight
    shared = sum(1 for p in model.parameters() if p.data_ptr() == weight.data_ptr())
    if shared > 1:
        module.weight = nn.Parameter(weight.detach().clone())
        if hasattr(model, "config"):
            model.config.tie_word_embeddings = False


def merge_adapters(model: nn.Module) -> int:
    """Fold every adapter delta into its wrapped weight and unwrap.

    Returns the number of adapters merged; afterwards the model has its
    original module structure and no extra parameters.
    """
    merged = 0
    for name, module in list(model.named_modules()):
        if not isinstance(module, LoraAdapter):
            continue
        parent = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
        leaf = name.rsplit(".", 1)[-1]
        wrapped = module.wrapped
        _untie_if_shared(model, wrapped)
        with torch.no_grad():
            delta = module.delta()
            if isinstance(wrapped, nn.Linear):
                wrapped.weight += delta
            else:  # Conv1D keeps (in, out)
                wrapped.weight += delta.T
        setattr(parent, leaf, wrapped)
        merged += 1
    for param in model.parameters():
        param.requires_grad = True
    return merged
