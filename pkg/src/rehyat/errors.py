class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class LayoutError(ValueError):
    pass


class DenominatorUnderflowError(FloatingPointError):
    pass


class StreamOrderError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str = "loss became non-finite"):
        super().__init__(f"{message} at step {step}")
        self.step = step
