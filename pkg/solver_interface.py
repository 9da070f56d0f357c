"""
Abstract base class for probability-flow ODE solvers
All solver implementations must inherit from this interface
"""

from abc import ABC, abstractmethod


class SolverInterface(ABC):
    """
    Abstract base class for fixed-grid ODE solvers
    All solver implementations (Euler, Heun, etc.) must inherit from this
    """

    kind = None

    @abstractmethod
    def integrate(self, x, times, rhs):
        """
        Integrate dx/dt = rhs(x, t) along a decreasing time grid

        Args:
            x: initial state at times[0]
            times: 1-D grid, times[-1] is the terminal time
            rhs: callable (x, t) -> dx/dt; every call is one function evaluation

        Returns:
            (terminal state, number of rhs evaluations)
        """
        pass

    @abstractmethod
    def nfe(self, n_steps):
        """
        Function evaluations used for n_steps steps ending at sigma = 0

        Args:
            n_steps: step count

        Returns:
            int: evaluations
        """
        pass

    @abstractmethod
    def steps_for_nfe(self, nfe):
        """
        Largest step count whose evaluation count fits in an NFE budget

        Args:
            nfe: requested budget

        Returns:
            int: step count (>= 1)
        """
        pass
