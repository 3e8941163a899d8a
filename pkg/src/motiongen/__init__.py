"""Motion-generation toolkit.

Score-based diffusion policies whose denoiser emits movement-primitive
weights, decoded into smooth action sequences with exact boundary
conditions. Includes a direct-sequence denoiser baseline, desk-scale
deformable-object tasks, a training harness, and motion-quality metrics.
"""

__version__ = "0.1.0"
