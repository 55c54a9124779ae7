#include <fstream>
#include <sstream>

#include "hdlg/training.hpp"
#include "json.hpp"

namespace hdlg {

MetricsLog::MetricsLog(const std::string& csv_path) : csv_path_(csv_path) {
    if (csv_path_.empty()) return;
    std::ofstream f(csv_path_);
    if (!f) throw std::runtime_error("cannot write metrics csv: " + csv_path_);
    f << "step,split,loss,accuracy,lr\n";
}

void MetricsLog::row(long long step, const std::string& split, double loss, double accuracy,
                     double lr) {
    if (csv_path_.empty()) return;
    std::ofstream f(csv_path_, std::ios::app);
    std::ostringstream os;
    os.precision(10);
    os << step << "," << split << "," << loss << "," << accuracy << "," << lr << "\n";
    f << os.str();
}

void MetricsLog::set(const std::string& key, const std::string& value) {
    summary_.emplace_back(key, value);
}

void MetricsLog::set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(12);
    os << value;
    summary_.emplace_back(key, os.str());
}

void MetricsLog::write_summary(const std::string& path) const {
    nlohmann::json j;
    for (const auto& [k, v] : summary_) j[k] = v;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write summary: " + path);
    f << j.dump(2) << "\n";
}

}  // namespace hdlg
