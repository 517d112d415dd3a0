from .layers import (Conv2D, Dense, GlobalAvgPool, L2Normalize, Layer,
                     MaxPool2D, ReLU, Softmax, l2_normalize)
from .losses import cross_entropy
from .network import (Network, backward, decode_array, encode_array, forward,
                      from_dict, load, predict, save, to_dict)
from .train import TrainConfig, accuracy, he_uniform, iterate_minibatches, sgd_step, train

__all__ = [
    "Layer", "Dense", "Conv2D", "MaxPool2D", "ReLU", "GlobalAvgPool",
    "L2Normalize", "Softmax", "l2_normalize", "cross_entropy",
    "Network", "forward", "backward", "predict", "to_dict", "from_dict",
    "save", "load", "encode_array", "decode_array",
    "TrainConfig", "train", "accuracy", "sgd_step", "he_uniform",
    "iterate_minibatches",
]
