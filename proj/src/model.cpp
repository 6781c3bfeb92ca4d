#include "metatst/model.hpp"

namespace metatst {

std::string to_string(TokenKind kind) {
    switch (kind) {
        case TokenKind::endo: return "endo";
        case TokenKind::exo: return "exo";
        case TokenKind::meta: return "meta";
    }
    return "unknown";
}

template class MetaTST<float>;
template class MetaTST<double>;

}  // namespace metatst
