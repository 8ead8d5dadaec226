from .blocks import (CLFF, CSCA, DSE, Conv, ConvBlock, DenseBlock, DenseLayer, SelfONN,
                     SelfOnnLayerConfig, Transition, match_resolution)
from .model import (PRESETS, DecoderStage, Encoder, EncoderConfig, ModelConfig, SegModel,
                    init_params, model_forward)
from .params import ParamStore
