"""Hierarchical LoRA: eight emotion-specific and two polarity-shared adapters per weight.

Matrices follow the row-vector convention ``y = x W``: for a wrapped
``nn.Linear`` the adapted weight is ``weight.T + A_p B_p + A_e B_e`` with
``A: (d_in, r)`` and ``B: (r, d_out)``.
"""

from __future__ import annotations

import contextlib
import re
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import torch
from torch import nn

from .errors import AdapterError, ConfigurationError
from .taxonomy import EMOTIONS, NUM_EMOTIONS, Emotion, EmotionLike, Polarity, parse_emotion, polarity_of

PLACEMENT_POLICIES = {
    "attention": [r"(^|\.)(to_q|to_k|to_v|to_out)$"],
    "attention+ff": [r"(^|\.)(to_q|to_k|to_v|to_out)$", r"(^|\.)ff\.(fc1|fc2)$"],
}

Policy = Union[str, Sequence[str], Callable[[str, nn.Module], bool]]


@dataclass(frozen=True)
class RoutingState:
    active_emotion: Optional[Emotion] = None
    active_polarity: Optional[Polarity] = None

    def __post_init__(self):
        if (
            self.active_emotion is not None
            and self.active_polarity is not None
            and polarity_of(self.active_emotion) is not self.active_polarity
        ):
            raise AdapterError(
                f"inconsistent routing: {self.active_emotion.label} is not {self.active_polarity.label}"
            )

    @property
    def is_base(self) -> bool:
        return self.active_emotion is None and self.active_polarity is None


BASE_STATE = RoutingState()


class LoRAPair(nn.Module):
    def __init__(self, d_in: int, d_out: int, rank: int = 4, scaling: float = 1.0, init_std: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1 or rank > min(d_in, d_out) // 2:
            raise ConfigurationError(f"rank {rank} violates r <= min(d, d')/2 for shape ({d_in}, {d_out})")
        std = 1.0 / rank if init_std is None else init_std
        self.rank = rank
        self.scaling = scaling
        self.A = nn.Parameter(torch.randn(d_in, rank, generator=generator) * std)
        self.B = nn.Parameter(torch.zeros(rank, d_out))

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.A @ self.B)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return self.scaling * ((x @ self.A) @ self.B)


class HiLoRABank(nn.Module):
    """The 8 + 2 adapters for a single base weight, plus its routing state."""

    def __init__(self, d_in: int, d_out: int, rank: int = 4, scaling: float = 1.0, *,
                 use_emotion: bool = True, use_polarity: bool = True, init_std: float | None = None,
                 generator: torch.Generator | None = None, target_ref: str = ""):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.target_ref = target_ref
        self.use_emotion = use_emotion
        self.use_polarity = use_polarity
        self.emotion = nn.ModuleList(
            LoRAPair(d_in, d_out, rank, scaling, init_std, generator) for _ in range(NUM_EMOTIONS)
        )
        self.polarity = nn.ModuleList(LoRAPair(d_in, d_out, rank, scaling, init_std, generator) for _ in Polarity)
        self.state = BASE_STATE

    def route(self, label: EmotionLike) -> RoutingState:
        emotion = parse_emotion(label)
        self.state = RoutingState(
            emotion if self.use_emotion else None,
            polarity_of(emotion) if self.use_polarity else None,
        )
        return self.state

    def clear(self) -> None:
        self.state = BASE_STATE

    def active_pairs(self, state: RoutingState | None = None) -> list[LoRAPair]:
        state = self.state if state is None else state
        pairs = []
        if state.active_polarity is not None:
            pairs.append(self.polarity[int(state.active_polarity)])
        if state.active_emotion is not None:
            pairs.append(self.emotion[int(state.active_emotion)])
        return pairs

    def delta(self, state: RoutingState | None = None) -> torch.Tensor:
        total = torch.zeros(self.d_in, self.d_out, dtype=self.emotion[0].A.dtype, device=self.emotion[0].A.device)
        for pair in self.active_pairs(state):
            total = total + pair.delta()
        return total

    def effective_weight(self, W: torch.Tensor, state: RoutingState | None = None) -> torch.Tensor:
        if W.shape != (self.d_in, self.d_out):
            raise AdapterError(f"weight shape {tuple(W.shape)} does not match adapter shape ({self.d_in}, {self.d_out})")
        out = W
        for pair in self.active_pairs(state):
            out = out + pair.delta()
        return out

    def apply(self, x: torch.Tensor) -> torch.Tensor | None:
        out = None
        for pair in self.active_pairs():
            y = pair.apply(x)
            out = y if out is None else out + y
        return out

    def trainable_parameters(self, state: RoutingState | None = None) -> list[nn.Parameter]:
        state = self.state if state is None else state
        if state.is_base:
            raise AdapterError("adapter updates require a routed state")
        return [p for pair in self.active_pairs(state) for p in (pair.A, pair.B)]

    def named_adapters(self) -> Iterator[tuple[str, str, LoRAPair]]:
        for e in EMOTIONS:
            yield "emotion", e.label, self.emotion[int(e)]
        for p in Polarity:
            yield "polarity", p.label, self.polarity[int(p)]


class HiLoRALinear(nn.Module):
    """``nn.Linear`` replacement adding the routed low-rank deltas."""

    def __init__(self, base: nn.Linear, bank: HiLoRABank):
        super().__init__()
        self.base = base
        self.bank = bank
        self._merged_from: torch.Tensor | None = None

    @property
    def merged(self) -> bool:
        return self._merged_from is not None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.merged:
            return y
        delta = self.bank.apply(x)
        return y if delta is None else y + delta

    def effective_weight(self, state: RoutingState | None = None) -> torch.Tensor:
        return self.bank.effective_weight(self.base_weight(), state)

    def base_weight(self) -> torch.Tensor:
        """Base weight in ``(d_in, d_out)`` layout."""
        return (self._merged_from if self.merged else self.base.weight).detach().T

    def merge(self) -> None:
        if self.merged:
            raise AdapterError(f"site {self.bank.target_ref!r} is already merged")
        original = self.base.weight.detach().clone()
        with torch.no_grad():
            if self.bank.active_pairs():
                self.base.weight.copy_((original.T + self.bank.delta()).T)
        self._merged_from = original

    def unmerge(self) -> None:
        if not self.merged:
            raise AdapterError(f"site {self.bank.target_ref!r} is not merged")
        with torch.no_grad():
            self.base.weight.copy_(self._merged_from)
        self._merged_from = None


def _compile_policy(policy: Policy) -> Callable[[str, nn.Module], bool]:
    if callable(policy):
        return policy
    if isinstance(policy, str):
        if policy not in PLACEMENT_POLICIES:
            raise ConfigurationError(f"unknown placement policy {policy!r}; expected one of {sorted(PLACEMENT_POLICIES)}")
        patterns = PLACEMENT_POLICIES[policy]
    else:
        patterns = list(policy)
    regexes = [re.compile(p) for p in patterns]
    return lambda name, module: any(r.search(name) for r in regexes)


class HiLoRAModel(nn.Module):
    """A denoiser whose matching linear layers carry HiLoRA banks.

    ``route`` fans a label out to every bank; the bank state is shared
    mutable state, so only one step may route at a time.
    """

    def __init__(self, denoiser: nn.Module, sites: dict[str, HiLoRALinear]):
        super().__init__()
        self.denoiser = denoiser
        self._sites = sites

    @property
    def sites(self) -> dict[str, HiLoRALinear]:
        return self._sites

    @property
    def banks(self) -> dict[str, HiLoRABank]:
        return {name: site.bank for name, site in self._sites.items()}

    @property
    def state(self) -> RoutingState:
        states = {site.bank.state for site in self._sites.values()}
        if len(states) != 1:
            raise AdapterError("banks disagree on routing state")
        return states.pop()

    def forward(self, *args, **kwargs):
        return self.denoiser(*args, **kwargs)

    def route(self, label: EmotionLike) -> RoutingState:
        self._check_unmerged("route")
        states = {site.bank.route(label) for site in self._sites.values()}
        return states.pop()

    def clear(self) -> None:
        self._check_unmerged("clear routing")
        for site in self._sites.values():
            site.bank.clear()

    @contextlib.contextmanager
    def routed(self, label: EmotionLike | None):
        """Route for the duration of a block, restoring the base state after."""
        if label is None:
            self.clear()
        else:
            self.route(label)
        try:
            yield self.state
        finally:
            self.clear()

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for site in self._sites.values() for p in site.bank.trainable_parameters()]

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for site in self._sites.values() for p in site.bank.parameters()]

    def merge(self) -> None:
        for site in self._sites.values():
            site.merge()

    def unmerge(self) -> None:
        for site in self._sites.values():
            site.unmerge()

    def _check_unmerged(self, action: str) -> None:
        if any(site.merged for site in self._sites.values()):
            raise AdapterError(f"cannot {action} while adapters are merged")

    def adapter_state_dict(self) -> dict[str, torch.Tensor]:
        """Matrices keyed by ``site/kind/label/{A,B}``."""
        out = {}
        for name, site in self._sites.items():
            for kind, label, pair in site.bank.named_adapters():
                out[f"{name}/{kind}/{label}/A"] = pair.A.detach().clone()
                out[f"{name}/{kind}/{label}/B"] = pair.B.detach().clone()
        return out

    def load_adapter_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        expected = set(self.adapter_state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise AdapterError(f"adapter state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        with torch.no_grad():
            for name, site in self._sites.items():
                for kind, label, pair in site.bank.named_adapters():
                    pair.A.copy_(state[f"{name}/{kind}/{label}/A"])
                    pair.B.copy_(state[f"{name}/{kind}/{label}/B"])

    def base_state_dict(self) -> dict[str, torch.Tensor]:
        """Denoiser state without adapter tensors, keyed as in the uninstrumented model."""
        out = {}
        for key, value in self.denoiser.state_dict().items():
            if ".bank." in key:
                continue
            out[key.replace(".base.", ".")] = value
        return out


def attach_to_denoiser(denoiser: nn.Module, policy: Policy = "attention", *, rank: int = 4, scaling: float = 1.0,
                       use_emotion: bool = True, use_polarity: bool = True, init_std: float | None = None,
                       seed: int = 0) -> HiLoRAModel:
    """Wrap every ``nn.Linear`` matched by ``policy`` in place and freeze the base."""
    match = _compile_policy(policy)
    targets = [(name, m) for name, m in denoiser.named_modules() if isinstance(m, nn.Linear) and match(name, m)]
    if not targets:
        raise ConfigurationError(f"placement policy {policy!r} matched no linear layers")
    for p in denoiser.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    sites = {}
    for name, linear in targets:
        bank = HiLoRABank(linear.in_features, linear.out_features, rank, scaling, use_emotion=use_emotion,
                          use_polarity=use_polarity, init_std=init_std, generator=g, target_ref=name)
        bank.to(dtype=linear.weight.dtype, device=linear.weight.device)
        wrapped = HiLoRALinear(linear, bank)
        parent_name, _, child = name.rpartition(".")
        parent = denoiser.get_submodule(parent_name) if parent_name else denoiser
        setattr(parent, child, wrapped)
        sites[name] = wrapped
    return HiLoRAModel(denoiser, sites)


def route(bank: HiLoRABank | HiLoRAModel, label: EmotionLike) -> RoutingState:
    return bank.route(label)


def effective_weight(bank: HiLoRABank, state: RoutingState, W: torch.Tensor) -> torch.Tensor:
    return bank.effective_weight(W, state)


def trainable_parameters(bank: HiLoRABank | HiLoRAModel, state: RoutingState | None = None) -> list[nn.Parameter]:
    if isinstance(bank, HiLoRAModel):
        if state is not None and state != bank.state:
            raise AdapterError("requested state differs from the model's routed state")
        return bank.trainable_parameters()
    return bank.trainable_parameters(state)
