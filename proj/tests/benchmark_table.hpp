#pragma once

#include "wdstagnn/evalbench.hpp"

namespace benchmark_table {

/// Published MAE of twelve forecasters on PeMS-BAY, PeMS03 and PeMS04.
inline wdstagnn::evalbench::ErrorTable mae() {
    return {{"ARIMA", "SVR", "VAR", "FC-LSTM", "DCRNN", "STGCN", "STSGCN", "GWN", "AGCRN", "GMAN", "DSTAGNN",
             "W-DSTAGNN"},
            {"PeMS-BAY", "PeMS03", "PeMS04"},
            {{3.38, 35.31, 33.73},
             {3.28, 21.97, 28.70},
             {2.93, 23.65, 23.75},
             {2.37, 21.33, 26.24},
             {2.07, 18.18, 24.70},
             {2.49, 17.49, 22.70},
             {2.11, 17.48, 21.19},
             {1.95, 19.85, 25.45},
             {1.96, 15.98, 19.83},
             {1.86, 16.87, 19.14},
             {1.72, 15.57, 19.30},
             {1.70, 15.31, 19.30}}};
}

} // namespace benchmark_table
