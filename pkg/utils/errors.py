"""
errors.py
=========
RCNet 파이프라인 공통 예외 정의.

각 예외는 CLI 종료 코드(exit_code)를 가지고 있으며 main.py 에서 그대로 사용한다.
- 0: 성공, 2: 잘못된 인자, 3: I/O, 4: 스키마/버전 불일치
"""


class RCNetError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class InvalidArgumentError(RCNetError, ValueError):
    exit_code = 2


class InvalidStateError(RCNetError, RuntimeError):
    exit_code = 1


class InvalidDatasetError(RCNetError, ValueError):
    exit_code = 1


class StorageError(RCNetError, OSError):
    """I/O failure; the message always carries the offending path."""

    exit_code = 3


class SchemaVersionError(RCNetError, ValueError):
    exit_code = 4
