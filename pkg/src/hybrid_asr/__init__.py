"""Rotary hybrid linear/softmax attention, re-parameterizable multi-branch
depthwise convolution and bilevel branch search for speech encoders."""

__version__ = "0.1.0"
