"""Exception hierarchy."""


class KtuneError(Exception):
    pass


class ManifestError(KtuneError):
    pass


class CurveError(KtuneError):
    pass


class FitError(KtuneError):
    pass


class OverlapError(KtuneError):
    pass


class EncodeError(KtuneError):
    pass


class LogParseError(EncodeError):
    pass
