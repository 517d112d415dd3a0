"""Architecture string parsing, shape tracing, network building."""

import numpy as np
import pytest

from advshield import nn
from advshield.arch import (DEFAULT_ARCH, build_network, parse_arch,
                            render_arch, trace_shapes)
from advshield.errors import ArchParseError


def test_default_arch_round_trip():
    spec = parse_arch(DEFAULT_ARCH)
    assert render_arch(spec) == DEFAULT_ARCH
    assert parse_arch(render_arch(spec)) == spec


def test_default_arch_shape_trace():
    spec = parse_arch(DEFAULT_ARCH)
    assert trace_shapes(spec) == [
        (20, 24, 24), (20, 12, 12), (50, 8, 8), (50, 4, 4), (500,), (10,)]


def test_input_marker_and_unicode_x():
    spec = parse_arch("(input) 1×28×28-10FC")
    assert spec.input_shape == (1, 28, 28)


def test_explicit_input_shape_argument():
    spec = parse_arch("10FC", input_shape=(5,))
    assert spec.input_shape == (5,)
    net = build_network(spec, seed=0)
    out, _, _ = nn.forward(net, np.zeros((2, 5)))
    assert out.shape == (2, 10)


def test_parse_errors_carry_position():
    with pytest.raises(ArchParseError) as err:
        parse_arch("1x28x28-20C5-XYZ-10FC")
    assert err.value.position == 2
    with pytest.raises(ArchParseError):
        parse_arch("20C5-10FC")  # no input shape anywhere
    with pytest.raises(ArchParseError):
        parse_arch("1x28x28-20C5")  # missing classifier head
    with pytest.raises(ArchParseError):
        parse_arch("1x4x4-64C9-10FC")  # kernel larger than the input


def test_build_network_layer_kinds():
    net = build_network(parse_arch(DEFAULT_ARCH), seed=0)
    kinds = [type(l).__name__ for l in net.layers]
    assert kinds == ["Conv2D", "ReLU", "MaxPool2D", "Conv2D", "ReLU",
                     "MaxPool2D", "Dense", "ReLU", "Dense"]
    assert net.output_shape == (10,)


def test_build_network_deterministic_init():
    a = build_network(parse_arch("1x8x8-2C3-6FC-4FC"), seed=9)
    b = build_network(parse_arch("1x8x8-2C3-6FC-4FC"), seed=9)
    for la, lb in zip(a.layers, b.layers):
        for pa, pb in zip(la.params(), lb.params()):
            np.testing.assert_array_equal(pa, pb)


def test_gap_token():
    spec = parse_arch("1x8x8-4C3-GAP-10FC")
    assert trace_shapes(spec) == [(4, 6, 6), (4,), (10,)]
