#pragma once

// Minimal SVG emission for the report figures: box plot grids over scenario
// panels and correlogram (lollipop) grids. Coordinates are formatted with
// fixed precision so identical inputs produce identical bytes.

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "dslmm/diagnostics.hpp"
#include "dslmm/stats.hpp"

namespace dslmm {

namespace svg {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

struct Canvas {
    std::string body;
    double width = 0.0;
    double height = 0.0;

    void line(double x1, double y1, double x2, double y2, const std::string& style) {
        body += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) +
                "\" y2=\"" + num(y2) + "\" style=\"" + style + "\"/>\n";
    }
    void rect(double x, double y, double w, double h, const std::string& style) {
        body += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) +
                "\" height=\"" + num(h) + "\" style=\"" + style + "\"/>\n";
    }
    void circle(double cx, double cy, double r, const std::string& style) {
        body += "<circle cx=\"" + num(cx) + "\" cy=\"" + num(cy) + "\" r=\"" + num(r) +
                "\" style=\"" + style + "\"/>\n";
    }
    void text(double x, double y, const std::string& s, double size = 11.0,
              const std::string& anchor = "middle") {
        body += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-size=\"" + num(size) +
                "\" font-family=\"sans-serif\" text-anchor=\"" + anchor + "\">" + s + "</text>\n";
    }

    std::string render() const {
        return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" "
               "width=\"" + num(width) + "\" height=\"" + num(height) + "\" viewBox=\"0 0 " +
               num(width) + " " + num(height) + "\">\n<rect width=\"100%\" height=\"100%\" "
               "fill=\"white\"/>\n" + body + "</svg>\n";
    }
};

struct Box {
    std::string label;
    double q05 = 0, q25 = 0, q50 = 0, q75 = 0, q95 = 0;
};

inline Box box_of(const std::string& label, const std::vector<double>& values) {
    const auto q = quantiles_of(values, {0.05, 0.25, 0.5, 0.75, 0.95});
    return {label, q[0], q[1], q[2], q[3], q[4]};
}

} // namespace svg

// One panel per scenario value; within a panel one box per method. An
// optional reference level per panel is drawn as a horizontal dashed line.
struct BoxPanel {
    std::string title;
    std::vector<svg::Box> boxes;
    double reference = std::numeric_limits<double>::quiet_NaN();
};

inline std::string render_boxplot_grid(const std::string& title, const std::vector<BoxPanel>& panels,
                                       const std::string& y_label) {
    const double panel_w = 180.0, panel_h = 220.0, margin = 46.0, top = 40.0;
    const int cols = std::min<int>(3, std::max<int>(1, static_cast<int>(panels.size())));
    const int rows = (static_cast<int>(panels.size()) + cols - 1) / cols;

    svg::Canvas c;
    c.width = margin * 2 + panel_w * cols;
    c.height = top + (panel_h + 40.0) * rows + 20.0;
    c.text(c.width / 2, 20.0, title, 14.0);

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& p : panels) {
        for (const auto& b : p.boxes) {
            lo = std::min(lo, b.q05);
            hi = std::max(hi, b.q95);
        }
        if (!std::isnan(p.reference)) {
            lo = std::min(lo, p.reference);
            hi = std::max(hi, p.reference);
        }
    }
    if (!(hi > lo)) { hi = lo + 1.0; }
    const double pad = 0.08 * (hi - lo);
    lo -= pad;
    hi += pad;

    for (std::size_t pi = 0; pi < panels.size(); ++pi) {
        const auto& panel = panels[pi];
        const double px = margin + panel_w * (pi % cols);
        const double py = top + (panel_h + 40.0) * (pi / cols);
        auto yy = [&](double v) { return py + panel_h * (1.0 - (v - lo) / (hi - lo)); };

        c.rect(px, py, panel_w, panel_h, "fill:none;stroke:#444;stroke-width:1");
        c.text(px + panel_w / 2, py - 6.0, panel.title, 12.0);
        // y axis ticks
        for (int tick = 0; tick <= 4; ++tick) {
            const double v = lo + (hi - lo) * tick / 4.0;
            char lab[32];
            std::snprintf(lab, sizeof(lab), "%.3g", v);
            c.line(px - 3, yy(v), px, yy(v), "stroke:#444;stroke-width:1");
            if (pi % cols == 0) c.text(px - 6, yy(v) + 3.5, lab, 9.0, "end");
        }
        if (!std::isnan(panel.reference))
            c.line(px, yy(panel.reference), px + panel_w, yy(panel.reference),
                   "stroke:#c33;stroke-width:1;stroke-dasharray:5,3");

        const double slot = panel_w / static_cast<double>(panel.boxes.size());
        for (std::size_t bi = 0; bi < panel.boxes.size(); ++bi) {
            const auto& b = panel.boxes[bi];
            const double cx = px + slot * (static_cast<double>(bi) + 0.5);
            const double bw = slot * 0.5;
            c.line(cx, yy(b.q05), cx, yy(b.q25), "stroke:#247;stroke-width:1");
            c.line(cx, yy(b.q75), cx, yy(b.q95), "stroke:#247;stroke-width:1");
            c.rect(cx - bw / 2, yy(b.q75), bw, yy(b.q25) - yy(b.q75),
                   "fill:#cde;stroke:#247;stroke-width:1");
            c.line(cx - bw / 2, yy(b.q50), cx + bw / 2, yy(b.q50), "stroke:#124;stroke-width:2");
            c.text(cx, py + panel_h + 12.0, b.label, 9.0);
        }
    }
    c.text(14.0, c.height / 2, y_label, 11.0);
    return c.render();
}

// Correlogram grid: one panel per (eu, group) series, vertical lollipop bars
// per lag, dashed band lines at +-1.96/sqrt(n).
inline std::string render_correlogram_grid(const std::string& title, const std::vector<AcfResult>& series) {
    const double panel_w = 150.0, panel_h = 110.0, margin = 40.0, top = 40.0;
    const int cols = std::min<int>(5, std::max<int>(1, static_cast<int>(series.size())));
    const int rows = (static_cast<int>(series.size()) + cols - 1) / cols;

    svg::Canvas c;
    c.width = margin * 2 + panel_w * cols;
    c.height = top + (panel_h + 34.0) * rows + 16.0;
    c.text(c.width / 2, 20.0, title, 14.0);

    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const double px = margin + panel_w * (si % cols);
        const double py = top + (panel_h + 34.0) * (si / cols);
        auto yy = [&](double v) { return py + panel_h * (1.0 - (v + 1.0) / 2.0); };

        c.rect(px, py, panel_w, panel_h, "fill:none;stroke:#444;stroke-width:1");
        c.text(px + panel_w / 2, py - 5.0, s.eu + "/" + std::to_string(s.group), 10.0);
        c.line(px, yy(0.0), px + panel_w, yy(0.0), "stroke:#888;stroke-width:1");
        c.line(px, yy(s.band), px + panel_w, yy(s.band),
               "stroke:#36c;stroke-width:1;stroke-dasharray:4,3");
        c.line(px, yy(-s.band), px + panel_w, yy(-s.band),
               "stroke:#36c;stroke-width:1;stroke-dasharray:4,3");
        const double slot = panel_w / (static_cast<double>(s.acf.size()) + 1.0);
        for (std::size_t h = 0; h < s.acf.size(); ++h) {
            const double cx = px + slot * (static_cast<double>(h) + 1.0);
            c.line(cx, yy(0.0), cx, yy(s.acf[h]), "stroke:#333;stroke-width:2");
            c.circle(cx, yy(s.acf[h]), 2.0, "fill:#333");
        }
    }
    return c.render();
}

} // namespace dslmm
