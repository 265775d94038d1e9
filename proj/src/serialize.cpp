#include "cmr/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "cmr/common.hpp"

namespace cmr {

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("read_u32: unexpected end of stream");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i)
        b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("read_f64: unexpected end of stream");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    const auto& shape = t.shape();
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) write_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) write_f64(os, v);
}

Tensor read_tensor(std::istream& is) {
    std::uint32_t rank = read_u32(is);
    if (rank > 8) throw IoError("read_tensor: implausible rank " +
                                std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (auto& d : shape) {
        d = read_u32(is);
        total *= d;
    }
    std::vector<double> data(total);
    for (double& v : data) v = read_f64(is);
    return Tensor::from_data(std::move(shape), std::move(data));
}

void read_tensor_into(std::istream& is, Tensor& t) {
    Tensor loaded = read_tensor(is);
    if (loaded.shape() != t.shape())
        throw IoError("read_tensor_into: shape mismatch: file has " +
                      shape_str(loaded.shape()) + ", expected " +
                      shape_str(t.shape()));
    t.mutable_data() = loaded.data();
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace cmr
