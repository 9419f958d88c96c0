#ifndef QPI_ERROR_HPP
#define QPI_ERROR_HPP

#include <stdexcept>
#include <string>

namespace qpi {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define QPI_DEFINE_ERROR(Name)                         \
    class Name : public Error {                        \
    public:                                            \
        explicit Name(const std::string& what)         \
            : Error(std::string(#Name ": ") + what) {} \
    }

QPI_DEFINE_ERROR(DomainError);
QPI_DEFINE_ERROR(InfiniteCoherenceError);
QPI_DEFINE_ERROR(GeometryError);
QPI_DEFINE_ERROR(PlacementError);
QPI_DEFINE_ERROR(AliasingError);
QPI_DEFINE_ERROR(OrderOverlapError);
QPI_DEFINE_ERROR(BoundsError);
QPI_DEFINE_ERROR(DegenerateFieldError);
QPI_DEFINE_ERROR(ContractError);
QPI_DEFINE_ERROR(InsufficientDataError);
QPI_DEFINE_ERROR(SplitError);
QPI_DEFINE_ERROR(IoError);
QPI_DEFINE_ERROR(FormatError);
QPI_DEFINE_ERROR(ShapeError);
QPI_DEFINE_ERROR(NumericFault);
QPI_DEFINE_ERROR(StateError);
QPI_DEFINE_ERROR(EmptyInputError);
QPI_DEFINE_ERROR(UndefinedRateError);
QPI_DEFINE_ERROR(DegenerateRocError);
QPI_DEFINE_ERROR(ConfigError);

#undef QPI_DEFINE_ERROR

/// Raised by the pipeline driver; carries the failing stage name.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& cause)
        : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace qpi

#endif  // QPI_ERROR_HPP
