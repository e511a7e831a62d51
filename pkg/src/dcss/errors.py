"""Exception hierarchy shared by every module."""


class DCSSError(Exception):
    exit_code = 1


class ValidationError(DCSSError, ValueError):
    exit_code = 2


class ScheduleError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    pass


class StateError(DCSSError, RuntimeError):
    exit_code = 3


class UnknownTaskError(DCSSError, KeyError):
    exit_code = 3

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown task"
