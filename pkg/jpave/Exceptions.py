from typing import Optional


class JpaveError(Exception):
    pass


class UserError(JpaveError):
    def __init__(self, *args, context: Optional[dict] = None, **kwargs) -> None:
        self.context = context or {}
        super().__init__(*args, **kwargs)


class ConfigError(UserError):
    pass


class DataError(UserError):
    pass


class CheckpointError(UserError):
    pass


class ContractError(JpaveError):
    pass


class GradCheckError(ContractError):
    def __init__(self, message: str, parameter: str, index: int) -> None:
        self.parameter = parameter
        self.index = index
        super().__init__(message)


class TrainingDivergedError(ContractError):
    def __init__(
        self, message: str, epoch: int, step: int, instance_id: Optional[str] = None
    ) -> None:
        self.epoch = epoch
        self.step = step
        self.instance_id = instance_id
        super().__init__(message)
