"""Error taxonomy shared by every module.

Each error carries a stable ``code`` string; the CLI maps any ForgeError to
exit status 1 and prints ``ERROR <code>: <detail>`` on stderr.
"""


class ForgeError(Exception):
    code = "Error"

    def __init__(self, detail: str = ""):
        self.detail = detail
        super().__init__(detail)

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}" if self.detail else self.code


class EmptyInput(ForgeError):
    code = "EmptyInput"


class NonFinite(ForgeError):
    code = "NonFinite"


class KOutOfRange(ForgeError):
    code = "KOutOfRange"


class ManifestMismatch(ForgeError):
    code = "ManifestMismatch"


class NonFiniteWeight(ForgeError):
    code = "NonFiniteWeight"


class DuplicateName(ForgeError):
    code = "DuplicateName"


class AsymmetricGram(ForgeError):
    code = "AsymmetricGram"


class GramDiagMismatch(ForgeError):
    code = "GramDiagMismatch"


class PopcountMismatch(ForgeError):
    code = "PopcountMismatch"


class UnknownUnit(ForgeError):
    code = "UnknownUnit"


class DimMismatch(ForgeError):
    code = "DimMismatch"


class SingularHessian(ForgeError):
    code = "SingularHessian"


class MissingGram(ForgeError):
    code = "MissingGram"


class NonFiniteActivation(ForgeError):
    code = "NonFiniteActivation"


class EmptyLayer(ForgeError):
    code = "EmptyLayer"


class AllZeroUnimportance(ForgeError):
    code = "AllZeroUnimportance"


class InfeasibleBudget(ForgeError):
    code = "InfeasibleBudget"


class GroupSizeMismatch(ForgeError):
    code = "GroupSizeMismatch"


class CoverageGap(ForgeError):
    code = "CoverageGap"


class UnsupportedTopology(ForgeError):
    code = "UnsupportedTopology"


class TopologyMismatch(ForgeError):
    code = "TopologyMismatch"


class InvalidConfig(ForgeError):
    code = "InvalidConfig"


class OutputExists(ForgeError):
    code = "OutputExists"
