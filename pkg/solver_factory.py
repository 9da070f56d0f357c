"""
Solver Factory
Creates the appropriate ODE solver based on the solver kind
"""

from ode_sampler import EulerSolver, HeunSolver


class SolverFactory:
    """
    Factory class to create the appropriate solver based on kind
    """

    SOLVERS = {
        "euler": EulerSolver,
        "heun": HeunSolver,
    }

    @staticmethod
    def create_solver(kind):
        """
        Create and return the solver for a kind

        Args:
            kind: 'euler' or 'heun' (case-insensitive)

        Returns:
            SolverInterface: solver instance

        Raises:
            ValueError: If the kind is unknown
        """
        key = str(kind).lower()
        if key not in SolverFactory.SOLVERS:
            raise ValueError(
                f"Unknown solver kind: {kind}\n"
                f"Supported solvers: {', '.join(SolverFactory.get_available_solvers())}"
            )
        return SolverFactory.SOLVERS[key]()

    @staticmethod
    def get_available_solvers():
        """
        List the solver kinds this factory can build

        Returns:
            list: solver kind names
        """
        return sorted(SolverFactory.SOLVERS)
