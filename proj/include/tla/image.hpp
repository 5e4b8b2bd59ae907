#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace tla {

// Grayscale or multi-channel raster, row-major with the channel index
// fastest: pixels[(y * width + x) * channels + c], values expected in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          pixels(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c = 0) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    void require_shape(int h, int w, int c, const std::string& who) const {
        if (height != h || width != w || channels != c)
            throw std::invalid_argument(who + ": expected " + std::to_string(h) + "x" +
                                        std::to_string(w) + "x" + std::to_string(c) + " image, got " +
                                        std::to_string(height) + "x" + std::to_string(width) + "x" +
                                        std::to_string(channels));
    }
};

}  // namespace tla
