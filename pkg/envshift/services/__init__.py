"""
Numerical services: substrate, generator, HMM, variational model, trainer
and evaluation. Import from the submodules directly.
"""
