#include "pbbn/image.hpp"

#include <fstream>

namespace pbbn {

Image::Image(int h, int w, int c, std::uint8_t fill) : height(h), width(w), channels(c) {
    if (h <= 0 || w <= 0 || (c != 1 && c != 3))
        throw std::invalid_argument("image: invalid dimensions " + std::to_string(h) + "x" + std::to_string(w) +
                                    "x" + std::to_string(c));
    pixels.assign(static_cast<std::size_t>(h) * w * c, fill);
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw std::runtime_error(path + ": truncated header");
    return tok;
}

int pnm_int(std::istream& in, const std::string& path) {
    const std::string tok = pnm_token(in, path);
    try {
        std::size_t pos = 0;
        int v = std::stoi(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(path + ": bad header token '" + tok + "'");
    }
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    const std::string name = path.string();
    if (!in) throw std::runtime_error(name + ": cannot open");

    const std::string magic = pnm_token(in, name);
    int channels;
    if (magic == "P5") channels = 1;
    else if (magic == "P6") channels = 3;
    else throw std::runtime_error(name + ": unsupported magic '" + magic + "' (want P5 or P6)");

    const int width = pnm_int(in, name);
    const int height = pnm_int(in, name);
    const int maxval = pnm_int(in, name);
    if (width <= 0 || height <= 0) throw std::runtime_error(name + ": bad dimensions");
    if (maxval != 255) throw std::runtime_error(name + ": maxval " + std::to_string(maxval) + " unsupported");
    // single whitespace byte between header and raster already consumed by tokenizer

    Image img(height, width, channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw std::runtime_error(name + ": truncated pixel data");
    return img;
}

void write_pnm(const Image& img, const std::filesystem::path& path) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_pnm: channels must be 1 or 3");
    if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels)
        throw std::invalid_argument("write_pnm: pixel buffer size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

}  // namespace pbbn
