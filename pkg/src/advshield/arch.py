"""Compact architecture strings.

Grammar (dash separated, optional ``(input)`` marker):

    (input) 1x28x28-20C5-MP2-50C5-MP2-500FC-10FC

``<n>C<k>`` is a convolution with ``n`` output channels and ``k``x``k``
filters, ``MP<w>`` a ``w``x``w`` max pooling, ``<n>FC`` a fully connected
layer with ``n`` neurons, and ``GAP`` global average pooling. Hidden
conv/FC layers get a ReLU; the final FC is the classifier head and does
not. ``x`` or the unicode multiplication sign both work in the input
shape token.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import ArchParseError
from .nn import Conv2D, Dense, GlobalAvgPool, MaxPool2D, Network, ReLU, he_uniform

# the stock victim for 28x28 grayscale digits
DEFAULT_ARCH = "1x28x28-20C5-MP2-50C5-MP2-500FC-10FC"


@dataclass(frozen=True)
class ConvToken:
    channels: int
    kernel: int


@dataclass(frozen=True)
class PoolToken:
    window: int


@dataclass(frozen=True)
class FCToken:
    units: int


@dataclass(frozen=True)
class GAPToken:
    pass


@dataclass(frozen=True)
class ArchSpec:
    tokens: tuple
    input_shape: tuple  # (channels, height, width)


_CONV_RE = re.compile(r"^(\d+)C(\d+)$")
_POOL_RE = re.compile(r"^MP(\d+)$")
_FC_RE = re.compile(r"^(\d+)FC$")
_SHAPE_RE = re.compile(r"^(\d+)[x×](\d+)[x×](\d+)$")


def parse_arch(text, input_shape=None):
    """Parse an architecture string into an :class:`ArchSpec`.

    The input shape may come from a leading ``CxHxW`` token or from the
    ``input_shape`` argument; shape consistency of the whole chain is
    checked as part of parsing.
    """
    body = text.replace("(input)", " ").strip()
    parts = [p.strip() for p in body.split("-") if p.strip()]
    if not parts:
        raise ArchParseError("empty architecture string", position=0)

    pos = 0
    m = _SHAPE_RE.match(parts[0])
    if m:
        input_shape = tuple(int(g) for g in m.groups())
        parts = parts[1:]
        pos = 1
    if input_shape is None:
        raise ArchParseError(
            "no input shape: expected a leading CxHxW token or an explicit "
            "input_shape argument", position=0)
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) not in (1, 3) or min(input_shape) < 1:
        raise ArchParseError(f"bad input shape {input_shape}", position=0)

    tokens = []
    for offset, part in enumerate(parts):
        position = pos + offset
        if m := _CONV_RE.match(part):
            tokens.append(ConvToken(int(m.group(1)), int(m.group(2))))
        elif m := _POOL_RE.match(part):
            tokens.append(PoolToken(int(m.group(1))))
        elif m := _FC_RE.match(part):
            tokens.append(FCToken(int(m.group(1))))
        elif part == "GAP":
            tokens.append(GAPToken())
        else:
            raise ArchParseError(
                f"unknown token {part!r} at position {position}",
                position=position)

    if not tokens or not isinstance(tokens[-1], FCToken):
        raise ArchParseError(
            "architecture must end with an FC classifier head",
            position=pos + len(parts))

    spec = ArchSpec(tuple(tokens), input_shape)
    trace_shapes(spec)  # raises on any mid-chain shape mismatch
    return spec


def render_arch(spec, include_input=True):
    parts = []
    if include_input:
        parts.append("x".join(str(s) for s in spec.input_shape))
    for tok in spec.tokens:
        if isinstance(tok, ConvToken):
            parts.append(f"{tok.channels}C{tok.kernel}")
        elif isinstance(tok, PoolToken):
            parts.append(f"MP{tok.window}")
        elif isinstance(tok, FCToken):
            parts.append(f"{tok.units}FC")
        else:
            parts.append("GAP")
    return "-".join(parts)


def trace_shapes(spec):
    """Per-token output shapes; raises ArchParseError on a mismatch."""
    shape = spec.input_shape
    shapes = []
    for i, tok in enumerate(spec.tokens):
        flat_only = len(shape) == 1
        if isinstance(tok, ConvToken):
            if flat_only:
                raise ArchParseError(
                    f"token {i}: convolution after flattened features",
                    position=i)
            c, h, w = shape
            if h < tok.kernel or w < tok.kernel:
                raise ArchParseError(
                    f"token {i}: {tok.kernel}x{tok.kernel} kernel larger than "
                    f"{h}x{w} activation", position=i)
            shape = (tok.channels, h - tok.kernel + 1, w - tok.kernel + 1)
        elif isinstance(tok, PoolToken):
            if flat_only:
                raise ArchParseError(
                    f"token {i}: pooling after flattened features", position=i)
            c, h, w = shape
            if h < tok.window or w < tok.window:
                raise ArchParseError(
                    f"token {i}: {tok.window}x{tok.window} pooling window "
                    f"larger than {h}x{w} activation", position=i)
            shape = (c, h // tok.window, w // tok.window)
        elif isinstance(tok, GAPToken):
            if flat_only:
                raise ArchParseError(
                    f"token {i}: GAP after flattened features", position=i)
            shape = (shape[0],)
        else:  # FCToken
            shape = (tok.units,)
        shapes.append(shape)
    return shapes


def build_network(spec, seed=0):
    """Realize an :class:`ArchSpec` as a seeded, He-initialized Network."""
    rng = np.random.default_rng(seed)
    layers = []
    shape = spec.input_shape
    n_fc = sum(isinstance(t, FCToken) for t in spec.tokens)
    fc_seen = 0
    for tok in spec.tokens:
        if isinstance(tok, ConvToken):
            c_in = shape[0]
            fan_in = c_in * tok.kernel * tok.kernel
            w = he_uniform(rng, (tok.channels, c_in, tok.kernel, tok.kernel),
                           fan_in)
            layers.append(Conv2D(w, np.zeros(tok.channels)))
            layers.append(ReLU())
            shape = (tok.channels, shape[1] - tok.kernel + 1,
                     shape[2] - tok.kernel + 1)
        elif isinstance(tok, PoolToken):
            layers.append(MaxPool2D(tok.window))
            shape = (shape[0], shape[1] // tok.window, shape[2] // tok.window)
        elif isinstance(tok, GAPToken):
            layers.append(GlobalAvgPool())
            shape = (shape[0],)
        else:
            fc_seen += 1
            in_dim = int(np.prod(shape))
            w = he_uniform(rng, (in_dim, tok.units), in_dim)
            layers.append(Dense(w, np.zeros(tok.units)))
            if fc_seen < n_fc:  # hidden FC layers are ReLU-activated
                layers.append(ReLU())
            shape = (tok.units,)
    return Network(layers, spec.input_shape)
