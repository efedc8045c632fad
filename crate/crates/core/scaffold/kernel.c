/* Evaluates the polynomial sum_{p=0..7} (p+1) * x^p at every point. */
void poly_eval(const double *x, double *y, long n)
{
    for (long i = 0; i < n; i++) {
        double acc = 0.0;
        for (int p = 0; p <= 7; p++)
            acc += (p + 1) * pow(x[i], p);
        y[i] = acc;
    }
}
