"""Function names declared by the ISO C standard library headers (C11).

Used to split call statements into builtin and external calls. Bump
``VERSION`` whenever the list changes, since it affects statement-type
reports.
"""

VERSION = "c11-1"

_HEADERS = {
    "assert.h": "assert",
    "ctype.h": """
        isalnum isalpha isblank iscntrl isdigit isgraph islower isprint ispunct
        isspace isupper isxdigit tolower toupper
    """,
    "errno.h": "",
    "fenv.h": """
        feclearexcept fegetexceptflag feraiseexcept fesetexceptflag fetestexcept
        fegetround fesetround fegetenv feholdexcept fesetenv feupdateenv
    """,
    "inttypes.h": "imaxabs imaxdiv strtoimax strtoumax wcstoimax wcstoumax",
    "locale.h": "setlocale localeconv",
    "math.h": """
        acos acosf acosl asin asinf asinl atan atanf atanl atan2 atan2f atan2l
        cos cosf cosl sin sinf sinl tan tanf tanl acosh acoshf acoshl asinh
        asinhf asinhl atanh atanhf atanhl cosh coshf coshl sinh sinhf sinhl tanh
        tanhf tanhl exp expf expl exp2 exp2f exp2l expm1 expm1f expm1l frexp
        frexpf frexpl ilogb ilogbf ilogbl ldexp ldexpf ldexpl log logf logl
        log10 log10f log10l log1p log1pf log1pl log2 log2f log2l logb logbf
        logbl modf modff modfl scalbn scalbnf scalbnl scalbln scalblnf scalblnl
        cbrt cbrtf cbrtl fabs fabsf fabsl hypot hypotf hypotl pow powf powl
        sqrt sqrtf sqrtl erf erff erfl erfc erfcf erfcl lgamma lgammaf lgammal
        tgamma tgammaf tgammal ceil ceilf ceill floor floorf floorl nearbyint
        nearbyintf nearbyintl rint rintf rintl lrint lrintf lrintl llrint
        llrintf llrintl round roundf roundl lround lroundf lroundl llround
        llroundf llroundl trunc truncf truncl fmod fmodf fmodl remainder
        remainderf remainderl remquo remquof remquol copysign copysignf
        copysignl nan nanf nanl nextafter nextafterf nextafterl nexttoward
        nexttowardf nexttowardl fdim fdimf fdiml fmax fmaxf fmaxl fmin fminf
        fminl fma fmaf fmal
    """,
    "setjmp.h": "setjmp longjmp",
    "signal.h": "signal raise",
    "stdarg.h": "va_start va_arg va_end va_copy",
    "stdio.h": """
        remove rename tmpfile tmpnam fclose fflush fopen freopen setbuf setvbuf
        fprintf fscanf printf scanf snprintf sprintf sscanf vfprintf vfscanf
        vprintf vscanf vsnprintf vsprintf vsscanf fgetc fgets fputc fputs getc
        getchar gets putc putchar puts ungetc fread fwrite fgetpos fseek
        fsetpos ftell rewind clearerr feof ferror perror fprintf_s printf_s
    """,
    "stdlib.h": """
        atof atoi atol atoll strtod strtof strtold strtol strtoll strtoul
        strtoull rand srand aligned_alloc calloc free malloc realloc abort
        atexit at_quick_exit exit _Exit getenv quick_exit system bsearch qsort
        abs labs llabs div ldiv lldiv mblen mbtowc wctomb mbstowcs wcstombs
    """,
    "string.h": """
        memcpy memmove strcpy strncpy strcat strncat memcmp strcmp strcoll
        strncmp strxfrm memchr strchr strcspn strpbrk strrchr strspn strstr
        strtok memset strerror strlen
    """,
    "threads.h": """
        call_once cnd_broadcast cnd_destroy cnd_init cnd_signal cnd_timedwait
        cnd_wait mtx_destroy mtx_init mtx_lock mtx_timedlock mtx_trylock
        mtx_unlock thrd_create thrd_current thrd_detach thrd_equal thrd_exit
        thrd_join thrd_sleep thrd_yield tss_create tss_delete tss_get tss_set
    """,
    "time.h": """
        clock difftime mktime time timespec_get asctime ctime gmtime localtime
        strftime
    """,
    "uchar.h": "mbrtoc16 c16rtomb mbrtoc32 c32rtomb",
    "wchar.h": """
        fwprintf fwscanf swprintf swscanf vfwprintf vfwscanf vswprintf vswscanf
        vwprintf vwscanf wprintf wscanf fgetwc fgetws fputwc fputws fwide getwc
        getwchar putwc putwchar ungetwc wcstod wcstof wcstold wcstol wcstoll
        wcstoul wcstoull wcscpy wcsncpy wmemcpy wmemmove wcscat wcsncat wcscmp
        wcscoll wcsncmp wcsxfrm wmemcmp wcschr wcscspn wcspbrk wcsrchr wcsspn
        wcsstr wcstok wmemchr wcslen wmemset wcsftime btowc wctob mbsinit mbrlen
        mbrtowc wcrtomb mbsrtowcs wcsrtombs
    """,
    "wctype.h": """
        iswalnum iswalpha iswblank iswcntrl iswdigit iswgraph iswlower iswprint
        iswpunct iswspace iswupper iswxdigit iswctype wctype towlower towupper
        towctrans wctrans
    """,
}

STDLIB_FUNCTIONS = frozenset(name for names in _HEADERS.values() for name in names.split())


def is_stdlib_function(name: str) -> bool:
    return name in STDLIB_FUNCTIONS
