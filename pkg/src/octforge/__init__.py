"""Two-stream (channel-difference + spectrum) octave-convolution face
forgery detector with attention fusion and cross-domain alignment, built on
a small numpy autodiff engine."""

__version__ = "0.1.0"
