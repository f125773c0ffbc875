"""Geodesic flow, the linearized lens X-ray transform on symmetric 2-tensors,
its normal operators, conjugate-point diagnostics and a desk-scale
linearized reconstruction.

Modules: metric_model (metrics and Christoffel symbols), geodesic_flow
(batched geodesic and Jacobi transport), tensor_fields (grid tensors and
the solenoidal decomposition), xray_transform (transforms, adjoints and
normal operators), conjugacy, symbol_lab (principal symbols), inversion,
config and cli.
"""

__version__ = "0.1.0"
