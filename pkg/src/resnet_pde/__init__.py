"""Residual networks as transport equations, and Hamilton-Jacobi control problems on point clouds.

Modules:

* :mod:`~resnet_pde.point_cloud` samples, kernels, charts and datasets
* :mod:`~resnet_pde.pim` point-integral gradients, Laplacians and WNLL interpolation
* :mod:`~resnet_pde.velocity` trainable velocity and normal-speed models
* :mod:`~resnet_pde.flows` forward-Euler characteristic flows and terminal maps
* :mod:`~resnet_pde.hj_solver` explicit solvers for the field problems
* :mod:`~resnet_pde.training` losses, reverse sweeps and training loops
* :mod:`~resnet_pde.cli` the ``resnet-pde`` command
"""
from .flows import FCTerminal, TimeGrid, WNLLTerminal, euler_flow, transport_predict
from .hj_solver import PDEProblem, cfl_suggest, hj_step, solve, viscous_hj_step
from .pim import (OperatorConfig, graph_laplacian, pim_gradient, pim_gradient_field,
                  pim_gradient_norm, wnll_interpolate, wnll_solve)
from .point_cloud import (AnalyticChart, KernelSpec, LabeledDataset, PointCloud,
                          analytic_gradient, build_cloud, gen_dataset, restrict_linear)
from .training import (LossSpec, TrainConfig, TrainReport, finite_diff_grad, grad_hj,
                       grad_transport, loss, train_field, train_transport)
from .velocity import (LinearVelocity, MLPVelocity, RBFVelocity, ResBlockVelocity,
                       param_grad)

__version__ = "0.1.0"
