from abc import ABC, abstractmethod


class Protomodel(ABC):
    """
    Prototype class for trainers, intended to be used in inheritance,
    not to be called.
    """
    def __init__(self):
        # set by fit()
        self.params = None
        self.dataset = None
        self.results = None

    @abstractmethod
    def fit(self):
        # Public method to fit model
        pass

    def get_results(self):
        """
        Returns the result object of the last call to fit().
        """
        return self.results


class Protoresult(ABC):
    """
    Prototype class for results object, intended to be used in inheritance,
    not to be called.
    """
    @abstractmethod
    def summary(self):
        # Public method to print summary
        pass

    @abstractmethod
    def plot(self):
        # Public method to plot general results
        pass


class InvalidDepthWarning(UserWarning):
    pass
