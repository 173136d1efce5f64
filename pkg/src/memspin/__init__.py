"""memspin: compile unitaries onto cascaded Raman memories and verify them.

Modules by concern:

- :mod:`memspin.core` units, mode algebra, effective rates, validity margins
- :mod:`memspin.compiler` unitary -> coupling-plan compilation
- :mod:`memspin.pde` gradient-echo light/spin integrator for cell chains
- :mod:`memspin.analytic` closed-form spin solutions and the ODE oracle
- :mod:`memspin.fock` few-photon heralded-gate verification
- :mod:`memspin.cli` config-driven scenario runner
"""

__version__ = "0.1.0"
