"""DCN-Net: dilated dense encoder, attention-gated skips, dual softmax heads."""

from __future__ import annotations

import hashlib
import math
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    stem_channels: int = 16
    growth_rate: int = 8
    ddb_layers: tuple = (3, 4, 5)
    ddb_dilations: tuple = ((1, 1, 2), (1, 1, 2, 4), (1, 1, 2, 4, 8))
    decoder_layers_per_block: int = 3
    compression: float = 0.5
    dropout_rate: float = 0.0
    joint_head: bool = False
    # initial foreground probability of the segmentation heads; None keeps zero biases
    head_prior: Optional[float] = 0.01
    seed: int = 0

    def __post_init__(self):
        self.ddb_layers = tuple(int(n) for n in self.ddb_layers)
        self.ddb_dilations = tuple(tuple(int(r) for r in d) for d in self.ddb_dilations)
        self.validate()

    def validate(self):
        if len(self.ddb_layers) != 3 or len(self.ddb_dilations) != 3:
            raise ConfigError("exactly three dilated dense blocks are required")
        for n, rates in zip(self.ddb_layers, self.ddb_dilations):
            if len(rates) != n:
                raise ConfigError(f"block with {n} layers has {len(rates)} dilation rates")
            if any(b < a for a, b in zip(rates, rates[1:])):
                raise ConfigError(f"dilation rates {rates} must be nondecreasing")
            for r in rates[2:]:
                if r & (r - 1):
                    raise ConfigError(f"dilation rate {r} in {rates} is not a power of two")
        if min(self.stem_channels, self.growth_rate, self.decoder_layers_per_block) < 1:
            raise ConfigError("channel counts and layer counts must be positive")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError("compression must lie in (0, 1]")
        if self.head_prior is not None and not 0.0 < self.head_prior < 1.0:
            raise ConfigError("head_prior must lie in (0, 1)")

    @property
    def max_dilation(self) -> int:
        return max(max(d) for d in self.ddb_dilations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ddb_layers"] = list(self.ddb_layers)
        d["ddb_dilations"] = [list(r) for r in self.ddb_dilations]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ForwardOutput(NamedTuple):
    """Per-head softmax probabilities, each shaped (B, 2, D, H, W).

    ``joint`` holds the (B, 3, D, H, W) probabilities of the single-head
    ablation; the dual-head fields are then None.
    """

    dentate: Optional[torch.Tensor]
    interposed: Optional[torch.Tensor]
    attention: torch.Tensor
    scores: list
    joint: Optional[torch.Tensor] = None
    features: Optional[dict] = None


class ConvUnit(nn.Sequential):
    """BN -> ReLU -> 3x3x3 (dilated) conv, pre-activation order."""

    def __init__(self, cin, cout, dilation=1, dropout=0.0):
        layers = [
            nn.BatchNorm3d(cin),
            nn.ReLU(inplace=True),
            nn.Conv3d(cin, cout, 3, padding=dilation, dilation=dilation, bias=False),
        ]
        if dropout > 0:
            layers.append(nn.Dropout3d(dropout))
        super().__init__(*layers)


class DenseBlock(nn.Module):
    """Dense block; with ``dilations`` set it is a dilated dense block.

    Output concatenates the input with every layer's ``growth`` new maps.
    """

    def __init__(self, cin, layers, growth, dilations=None, dropout=0.0):
        super().__init__()
        dilations = dilations or (1,) * layers
        if len(dilations) != layers:
            raise ConfigError("one dilation rate per layer is required")
        self.dilations = tuple(dilations)
        self.units = nn.ModuleList(
            ConvUnit(cin + k * growth, growth, d, dropout) for k, d in enumerate(self.dilations)
        )
        self.in_channels = cin
        self.out_channels = cin + layers * growth

    def forward(self, x):
        min_size = 2 * max(self.dilations) + 1
        if min(x.shape[2:]) < min_size:
            raise ConfigError(
                f"spatial size {tuple(x.shape[2:])} too small for dilation {max(self.dilations)}"
                f" (need >= {min_size})"
            )
        feats = [x]
        for unit in self.units:
            feats.append(unit(torch.cat(feats, 1)))
        return torch.cat(feats, 1)


class Transition(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.BatchNorm3d(cin), nn.ReLU(inplace=True), nn.Conv3d(cin, cout, 1, bias=False))


class AttentionModule(nn.Module):
    """Spatial attention gate on a skip connection.

    The skip is projected to the gating width, the gating signal is
    upsampled to skip resolution, and channel-wise mean, max and a learned
    squeeze of their sum feed an ELU + 1x1x1 conv + sigmoid score map.
    """

    def __init__(self, skip_channels, gating_channels):
        super().__init__()
        self.project = nn.Conv3d(skip_channels, gating_channels, 1)
        self.squeeze = nn.Conv3d(gating_channels, 1, 1)
        self.score = nn.Conv3d(3, 1, 1)

    def forward(self, skip, gating):
        proj = self.project(skip)
        if proj.shape[1] != gating.shape[1]:
            raise RuntimeError(f"channel mismatch: {proj.shape[1]} vs {gating.shape[1]}")
        if gating.shape[2:] != skip.shape[2:]:
            gating = F.interpolate(gating, size=skip.shape[2:], mode="trilinear", align_corners=False)
        s = proj + gating
        pooled = torch.cat([s.mean(1, keepdim=True), s.amax(1, keepdim=True), self.squeeze(s)], 1)
        score = torch.sigmoid(self.score(F.elu(pooled)))
        return skip * score, score


class DCNNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        g = config.growth_rate
        p = config.dropout_rate

        self.stem = nn.Conv3d(config.in_channels, config.stem_channels, 3, padding=1, bias=False)
        c = config.stem_channels
        self.ddb = nn.ModuleList()
        self.transitions = nn.ModuleList()
        self.ddb_channels = []
        for i, (n, rates) in enumerate(zip(config.ddb_layers, config.ddb_dilations)):
            block = DenseBlock(c, n, g, rates, p)
            self.ddb.append(block)
            self.ddb_channels.append(block.out_channels)
            c = block.out_channels
            if i < 2:
                t_out = max(1, int(c * config.compression))
                self.transitions.append(Transition(c, t_out))
                c = t_out

        cin = config.in_channels
        s1 = self.ddb_channels[0]
        s2 = self.ddb_channels[1] + cin
        s3 = self.ddb_channels[2] + cin
        nl = config.decoder_layers_per_block
        new = nl * g

        self.dec3 = DenseBlock(s3, nl, g, dropout=p)
        self.up3 = nn.ConvTranspose3d(self.dec3.out_channels, new, 3, stride=2, padding=1, output_padding=1)
        self.att2 = AttentionModule(s2, new)
        self.dec2 = DenseBlock(new + s2, nl, g, dropout=p)
        self.up2 = nn.ConvTranspose3d(self.dec2.out_channels, new, 3, stride=2, padding=1, output_padding=1)
        self.att1 = AttentionModule(s1, new)
        self.dec1 = DenseBlock(new + s1, nl, g, dropout=p)

        cout = self.dec1.out_channels
        self.final = nn.Sequential(nn.BatchNorm3d(cout), nn.ReLU(inplace=True))
        if config.joint_head:
            self.head_joint = nn.Conv3d(cout, 3, 1)
        else:
            self.head_dentate = nn.Conv3d(cout, 2, 1)
            self.head_interposed = nn.Conv3d(cout, 2, 1)
        self.head_attention = nn.Conv3d(2, 2, 1)

        self._init_weights(config.seed)

    def _init_weights(self, seed):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for m in self.modules():
                if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    if m.bias is not None:
                        nn.init.zeros_(m.bias)
                elif isinstance(m, nn.BatchNorm3d):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)
        if self.config.head_prior is not None:
            # foreground channels start near the prior so rare classes do not saturate early
            b = math.log(self.config.head_prior / (1 - self.config.head_prior))
            heads = [self.head_joint] if self.config.joint_head else [self.head_dentate, self.head_interposed]
            with torch.no_grad():
                for h in heads:
                    h.bias[1:] = b

    def encode(self, x):
        """Full-resolution encoder; returns the three dilated dense block outputs."""
        h = self.stem(x)
        outs = []
        for i, block in enumerate(self.ddb):
            h = block(h)
            outs.append(h)
            if i < 2:
                h = self.transitions[i](h)
        return outs

    def forward(self, x, pyramids=None, return_features=False) -> ForwardOutput:
        if any(s % 4 for s in x.shape[2:]):
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} must be divisible by 4")
        if pyramids is None:
            pyramids = [F.avg_pool3d(x, 2), F.avg_pool3d(x, 4)]
        e1, e2, e3 = self.encode(x)
        s1 = e1
        s2 = torch.cat([F.max_pool3d(e2, 2), pyramids[0]], 1)
        s3 = torch.cat([F.max_pool3d(e3, 4), pyramids[1]], 1)

        d = self.up3(self.dec3(s3))
        s2_att, a2 = self.att2(s2, d)
        d = self.up2(self.dec2(torch.cat([d, s2_att], 1)))
        s1_att, a1 = self.att1(s1, d)
        d = self.final(self.dec1(torch.cat([d, s1_att], 1)))

        a2_full = F.interpolate(a2, size=x.shape[2:], mode="trilinear", align_corners=False)
        p_att = torch.softmax(self.head_attention(torch.cat([a2_full, a1], 1)), 1)
        feats = {"ddb1": e1, "ddb2": e2, "ddb3": e3} if return_features else None
        if self.config.joint_head:
            joint = torch.softmax(self.head_joint(d), 1)
            return ForwardOutput(None, None, p_att, [a2, a1], joint, feats)
        p_d = torch.softmax(self.head_dentate(d), 1)
        p_i = torch.softmax(self.head_interposed(d), 1)
        return ForwardOutput(p_d, p_i, p_att, [a2, a1], None, feats)


def build_model(config: ModelConfig) -> DCNNet:
    return DCNNet(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def checksum(model: nn.Module) -> str:
    """SHA-256 over the state dict, in key order."""
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: DCNNet, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "weights.pt")
    meta = {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "parameter_count": parameter_count(model),
        "format_version": FORMAT_VERSION,
        "checksum": checksum(model),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path) -> DCNNet:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {meta.get('format_version')} in {path}")
    model = DCNNet(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.eval()
    return model
