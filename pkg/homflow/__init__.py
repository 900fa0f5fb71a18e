# homflow - periodic homogenization of 2D perfect fluid flows
# Cell correctors, effective tensors, cell and homogenized flow solvers

__version__ = "0.1.0"
