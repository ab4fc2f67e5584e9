import numpy as np
import pytest

from kernelshrink import BackboneSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_backbone(c_in=1, width=4, classes=3, dims=(8, 8, 8), replaceable=2,
                  head="classification", stem_stride=1):
    """A small spec: pointwise stem + replaceable 3x3x3 body layers."""
    layers = [{"name": "stem", "type": "conv", "out_channels": width,
               "kernel": "1x1x1", "stride": stem_stride}]
    for i in range(replaceable):
        layers.append({"name": f"body{i + 1}", "type": "conv",
                       "out_channels": width, "kernel": "3x3x3",
                       "replaceable": True})
    return BackboneSpec.from_dict({
        "name": "tiny", "input_channels": c_in, "num_classes": classes,
        "head": head, "input_dims": list(dims), "layers": layers})


@pytest.fixture
def tiny_spec():
    return tiny_backbone()
