"""voxelseg: volumetric tumor segmentation with voxel-wise uncertainty.

A patch-trained V-Net variant (instance norm, ELU, strided downsampling,
4-channel softmax) with dice-loss training, connected-component
post-processing, and epistemic/aleatoric uncertainty maps from test-time
dropout and test-time augmentation.
"""

__version__ = "0.1.0"
