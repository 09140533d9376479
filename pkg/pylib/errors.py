# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.errors
'''
Exception hierarchy. Estimation stages that can legitimately fail frame-to-frame report
through status results instead; these are for caller bugs, degenerate input and bad data.
'''


class VOError(Exception):
    ''' Base class for errors raised by mahalvo'''
    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class DegenerateGeometryError(VOError):
    ''' Raised when the input geometry admits no unique answer (zero line, planar points, zero E...)'''


class InsufficientDataError(VOError):
    ''' Raised when fewer samples are supplied than the solver needs'''


class EstimationError(VOError):
    ''' Raised when an estimator runs but cannot produce a usable result'''
    def __init__(self, message: str, cause: str | None = None):
        super().__init__(message)
        self.cause = cause

    def __str__(self):
        return f'{self.message} (cause: {self.cause})' if self.cause else self.message


class SequenceFormatError(VOError):
    ''' Raised when a sequence directory, calibration or pose file is malformed'''
    def __init__(self, message: str, path=None, line_no: int | None = None):
        super().__init__(message)
        self.path = path
        self.line_no = line_no

    def __str__(self):
        where = str(self.path) if self.path is not None else ''
        if self.line_no is not None:
            where = f'{where}:{self.line_no}'
        return f'{where}: {self.message}' if where else self.message


class ConfigError(VOError):
    ''' Raised when a configuration file or override holds an invalid value'''
