"""evotutor: population-based tutor training against a simulated student.

A POMDP student simulator with explicit cognitive dynamics, a cascaded
gate/process/outcome reward, and a dense policy whose weights decompose into a
frozen base plus an evolvable adapter and a gradient-trained adapter. The
outer loop is Pareto-selected evolution over adapter genotypes; the inner loop
is PPO with per-objective conflict-projected gradients.
"""

__version__ = "0.1.0"
