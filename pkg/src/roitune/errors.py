"""Exception hierarchy.

Everything raised on bad input derives from :class:`InputError` so the CLI can
map it onto exit code 1; :class:`PropertyFailure` maps onto exit code 2.
"""


class RoiTuneError(Exception):
    pass


class InputError(RoiTuneError):
    pass


class PropertyFailure(RoiTuneError):
    pass


# geometry
class DegenerateBox(InputError):
    pass


class NonFinite(InputError):
    pass


# kernels / model
class ShapeMismatch(InputError):
    pass


# sequences
class MalformedPlaceholder(InputError):
    pass


class DuplicateImageSlot(InputError):
    pass


class MissingRegionEmbedding(InputError):
    def __init__(self, index):
        super().__init__(f"no region embedding for <region{index}>")
        self.index = index


class MissingImageEmbedding(InputError):
    pass


class UnterminatedAnswer(InputError):
    pass


class SequenceTooShort(InputError):
    pass


class InvalidRecord(InputError):
    pass


# converters
class UnknownCategory(InputError):
    pass


class EmptyCaption(InputError):
    pass


class TooFewRegions(InputError):
    pass


class MissingCategory(InputError):
    pass


class BadOptionCount(InputError):
    pass


class DanglingCategoryId(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, offset=None, path=None):
        where = f" (byte {offset})" if offset is not None else ""
        src = f"{path}: " if path else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


class FormatError(InputError):
    pass


class MissingFeatureFile(InputError):
    def __init__(self, image_id, path=None):
        super().__init__(f"no feature file for image {image_id!r}" + (f" ({path})" if path else ""))
        self.image_id = image_id


class NoFixtures(InputError):
    pass


# training
class EmptyMask(InputError):
    pass


class Divergence(RoiTuneError):
    pass
