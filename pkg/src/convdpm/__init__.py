"""End-to-end trainable ConvNet + deformable parts model + NMS detector.

Everything is plain numpy: a small reverse-mode gradient engine, an image
pyramid, a convolutional feature net, DPM layers (deformation, AND, OR),
greedy non-maximum suppression and a structured loss defined on the
post-NMS predictions.
"""

__version__ = "0.1.0"
