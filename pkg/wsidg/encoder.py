"""
Patch encoder ``f`` and the frozen style-feature extractor.

:class:`PatchEncoder` is a convolutional backbone followed by a two-layer
MLP projection producing the embedding ``v`` and a linear classifier head
producing two logits. The classifier reads the projected embedding; feeding
it the pooled backbone features instead is the other reading of the method
and only needs ``classify`` to take backbone features.

Inputs are ``N x 3 x S x S`` float tensors with values in [0, 1]
(see :func:`to_tensor`), where ``S`` is ``EncoderConfig.input_size``.
"""

import copy
import logging
import os

from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from torch import nn
from torchvision.models import ResNet18_Weights, resnet18

from .exceptions import CheckpointMismatchError, MissingArtifactError, RejectedInputError
from .validators import validate_finite, validate_int

logger = logging.getLogger(__name__)

BACKBONES = ('tiny', 'resnet18')
STYLE_MODES = ('A', 'B')
N_CLASSES = 2

CHECKPOINT_FORMAT = 'wsidg-checkpoint'
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig(object):
    """
    1. backbone - ``tiny`` (three conv stages, the desk-scale default) or
       ``resnet18`` (torchvision ResNet-18 without its final layer).
    2. embed_dim - dimension D of the projected embedding.
    3. hidden_dim - width of the projection's hidden layer.
    4. input_size - expected patch edge length in pixels.
    5. pretrained_init - load ImageNet weights (``resnet18`` only; needs
       network access).
    """
    backbone: str = 'tiny'
    embed_dim: int = 128
    hidden_dim: int = 256
    input_size: int = 256
    pretrained_init: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise RejectedInputError(
                'backbone must be one of {}, got {!r}'.format(', '.join(BACKBONES), self.backbone)
            )
        validate_int(self.embed_dim, 'embed_dim', minimum=1)
        validate_int(self.hidden_dim, 'hidden_dim', minimum=1)
        validate_int(self.input_size, 'input_size', minimum=8)


@dataclass
class Embedding(object):
    patch_id: str
    vector: np.ndarray


def to_tensor(patches):
    """
    Converts uint8 ``H x W x 3`` pixels (one patch or a stacked batch) to a
    float32 ``N x 3 x H x W`` tensor with values in [0, 1].
    """
    array = np.asarray(patches)
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4 or array.shape[-1] != 3:
        raise RejectedInputError('patches must be N x H x W x 3, got {}'.format(array.shape))
    tensor = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32) / 255.0)
    return tensor.permute(0, 3, 1, 2).contiguous()


class TinyBackbone(nn.Module):
    out_dim = 64

    def __init__(self):
        super(TinyBackbone, self).__init__()
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(3, 16, kernel_size=5, stride=4, padding=2), nn.ReLU()),
            nn.Sequential(nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1), nn.ReLU()),
        ])
        self.pool = nn.AdaptiveAvgPool2d(1)

    def stage_outputs(self, x, n_stages):
        outputs = []
        for stage in self.stages[:n_stages]:
            x = stage(x)
            outputs.append(x)
        return outputs

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return torch.flatten(self.pool(x), 1)


class ResNetBackbone(nn.Module):
    out_dim = 512

    def __init__(self, pretrained=False):
        super(ResNetBackbone, self).__init__()
        net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1 if pretrained else None)
        self.stages = nn.ModuleList([
            nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1),
            net.layer2,
            net.layer3,
            net.layer4,
        ])
        self.pool = net.avgpool

    def stage_outputs(self, x, n_stages):
        outputs = []
        for stage in self.stages[:n_stages]:
            x = stage(x)
            outputs.append(x)
        return outputs

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return torch.flatten(self.pool(x), 1)


class PatchEncoder(nn.Module):
    """
    Feature extractor ``f`` with projection head and classifier.

    Example::

        encoder = build_encoder(EncoderConfig(input_size=64), seed=0)
        v = encoder.embed(to_tensor(patches))
        logits = encoder.classify(v)
    """

    def __init__(self, config):
        super(PatchEncoder, self).__init__()
        self.config = config
        if config.backbone == 'tiny':
            self.backbone = TinyBackbone()
        else:
            self.backbone = ResNetBackbone(pretrained=config.pretrained_init)
        # Exactly two affine layers.
        self.projection = nn.Sequential(
            nn.Linear(self.backbone.out_dim, config.hidden_dim),
            nn.ReLU(),
            nn.Linear(config.hidden_dim, config.embed_dim),
        )
        self.classifier = nn.Linear(config.embed_dim, N_CLASSES)

    def check_input(self, x):
        size = self.config.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise RejectedInputError(
                'Expected a batch of shape (N, 3, {0}, {0}), got {1}'.format(size, tuple(x.shape))
            )

    def embed(self, x):
        """
        Returns the ``N x D`` projected embeddings of a batch of patches.
        """
        self.check_input(x)
        return self.projection(self.backbone(x))

    def classify(self, embeddings):
        """
        Returns ``N x 2`` logits for *embeddings*.
        """
        if embeddings.dim() != 2 or embeddings.shape[1] != self.config.embed_dim:
            raise RejectedInputError(
                'Expected embeddings of shape (N, {}), got {}'.format(
                    self.config.embed_dim, tuple(embeddings.shape))
            )
        return self.classifier(embeddings)

    def forward(self, x):
        embeddings = self.embed(x)
        return embeddings, self.classify(embeddings)

    def stage_activations(self, x, n_stages=2):
        self.check_input(x)
        return self.backbone.stage_outputs(x, n_stages)


def build_encoder(config, seed=0):
    """
    Builds a :class:`PatchEncoder` whose initial parameters depend only on
    *seed*; the global torch RNG is left untouched.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return PatchEncoder(config)


def embed_records(encoder, dataset, records, batch_size=64):
    """
    Embeds *records* of *dataset* in inference mode and returns a list of
    :class:`Embedding` objects in record order.
    """
    was_training = encoder.training
    encoder.eval()
    embeddings = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            batch = to_tensor(dataset.load_images([r.patch_id for r in chunk]))
            vectors = encoder.embed(batch).numpy()
            validate_finite(vectors, 'embeddings')
            embeddings.extend(Embedding(r.patch_id, v) for r, v in zip(chunk, vectors))
    encoder.train(was_training)
    return embeddings


class StyleExtractor(object):
    """
    Frozen extractor of style features: per-channel means followed by
    per-channel standard deviations.

    Mode ``A`` reads the first *n_stages* stages of a frozen copy of the
    encoder taken when the extractor is built (so later training never
    changes its output). Mode ``B`` reads the raw RGB channels and needs no
    network.
    """

    def __init__(self, encoder=None, mode='A', n_stages=2):
        if mode not in STYLE_MODES:
            raise RejectedInputError(
                'style mode must be one of {}, got {!r}'.format(', '.join(STYLE_MODES), mode)
            )
        self.mode = mode
        self.n_stages = n_stages
        self.network = None
        if mode == 'A':
            if encoder is None:
                raise RejectedInputError('style mode A needs an encoder')
            self.network = copy.deepcopy(encoder).eval()
            for parameter in self.network.parameters():
                parameter.requires_grad_(False)

    def __call__(self, patches):
        """
        Returns an ``N x S`` float64 array of style features (a single
        ``S``-vector when given one ``H x W x 3`` patch).
        """
        single = np.asarray(patches).ndim == 3
        if self.mode == 'B':
            pixels = np.asarray(patches, dtype=np.float64) / 255.0
            if single:
                pixels = pixels[None]
            features = np.concatenate(
                [pixels.mean(axis=(1, 2)), pixels.std(axis=(1, 2))], axis=1)
        else:
            with torch.no_grad():
                activations = self.network.stage_activations(to_tensor(patches), self.n_stages)
            means = [a.mean(dim=(2, 3)) for a in activations]
            stds = [a.std(dim=(2, 3), unbiased=False) for a in activations]
            features = torch.cat(means + stds, dim=1).double().numpy()
        return features[0] if single else features

    style_features = __call__


def save_checkpoint(path, encoder, epoch=None, metrics=None, rng_state=None):
    """
    Writes a versioned checkpoint holding the encoder parameters, its
    :class:`EncoderConfig` and the RNG states needed to resume.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save({
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'encoder_config': asdict(encoder.config),
        'state_dict': encoder.state_dict(),
        'torch_rng_state': torch.get_rng_state(),
        'rng_state': rng_state,
        'epoch': epoch,
        'metrics': metrics or {},
    }, path)
    return path


def load_checkpoint(path, expected_config=None):
    """
    Loads a checkpoint written by :func:`save_checkpoint` and returns
    ``(encoder, payload)``. Raises ``CheckpointMismatchError`` if the file is
    not a checkpoint of this format or if its encoder config differs from
    *expected_config*.
    """
    if not os.path.exists(path):
        raise MissingArtifactError('Checkpoint', path)
    payload = torch.load(path, map_location='cpu', weights_only=False)
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError('{} is not a wsidg checkpoint'.format(path))
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            'Checkpoint {} has version {}, expected {}'.format(
                path, payload.get('version'), CHECKPOINT_VERSION)
        )
    config = EncoderConfig(**payload['encoder_config'])
    if expected_config is not None and asdict(expected_config) != asdict(config):
        raise CheckpointMismatchError(
            'Checkpoint {} was trained with {}, expected {}'.format(path, config, expected_config)
        )
    # Parameters come from the file; skip downloading pretrained weights.
    encoder = PatchEncoder(replace(config, pretrained_init=False))
    encoder.config = config
    encoder.load_state_dict(payload['state_dict'])
    encoder.eval()
    return encoder, payload
